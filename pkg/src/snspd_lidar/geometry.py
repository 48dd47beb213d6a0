"""Per-pixel fit frames, point clouds, plane-fit resolution analysis and Delaunay meshes."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from importlib import resources
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree

from .errors import DomainError, InsufficientDataError, InvariantError
from .fitting import FitResult, fit_gaussian_xy
from .scene import ScanGrid, direction_from_angles
from .units import FWHM_PER_SIGMA, tof_to_distance

FIT_COLUMNS = ["row", "col", "amplitude", "center_ps", "fwhm_ps", "baseline", "residual_rms", "converged"]
CLOUD_COLUMNS = ["row", "col", "x_mm", "y_mm", "z_mm", "peak_height", "fwhm_ps", "fused"]


# -------------------------------------------------------------- frames --

@dataclass
class ScanFrame:
    """Gridded fit results of one scan; arrays are ``(rows, cols)``, rows follow ``vy``."""

    vx: np.ndarray
    vy: np.ndarray
    amplitude: np.ndarray
    center: np.ndarray
    fwhm: np.ndarray
    baseline: np.ndarray
    residual_rms: np.ndarray
    converged: np.ndarray
    t_0: float = 0.0

    @property
    def shape(self) -> tuple[int, int]:
        return self.center.shape

    @property
    def distance(self) -> np.ndarray:
        d = tof_to_distance(self.center, self.t_0)
        return np.where(self.converged, d, np.nan)

    @classmethod
    def from_fits(cls, grid: ScanGrid, fits: Sequence[FitResult]) -> "ScanFrame":
        rows, cols = grid.shape
        if len(fits) != rows * cols:
            raise DomainError(f"expected {rows * cols} fits, got {len(fits)}")

        def grab(attr, dtype=float):
            return np.array([getattr(f, attr) for f in fits], dtype=dtype).reshape(rows, cols)

        return cls(
            np.array(grid.vx_values),
            np.array(grid.vy_values),
            grab("amplitude"),
            grab("center"),
            grab("fwhm"),
            grab("baseline"),
            grab("residual_rms"),
            grab("converged", bool),
            grid.t_0,
        )


def write_fit_csv(frame: ScanFrame, path) -> None:
    rows, cols = frame.shape
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(FIT_COLUMNS)
        for r in range(rows):
            for c in range(cols):
                w.writerow(
                    [r, c]
                    + [repr(float(a[r, c])) for a in (frame.amplitude, frame.center, frame.fwhm, frame.baseline, frame.residual_rms)]
                    + [int(frame.converged[r, c])]
                )


def read_fit_csv(path, grid: ScanGrid) -> ScanFrame:
    rows, cols = grid.shape
    arrays = {k: np.full((rows, cols), np.nan) for k in FIT_COLUMNS[2:7]}
    conv = np.zeros((rows, cols), dtype=bool)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        if next(reader, None) != FIT_COLUMNS:
            raise ValueError(f"{path}: not a fit-results CSV")
        for rec in reader:
            r, c = int(rec[0]), int(rec[1])
            for k, v in zip(FIT_COLUMNS[2:7], rec[2:7]):
                arrays[k][r, c] = float(v)
            conv[r, c] = rec[7] == "1"
    return ScanFrame(
        np.array(grid.vx_values), np.array(grid.vy_values), arrays["amplitude"], arrays["center_ps"], arrays["fwhm_ps"],
        arrays["baseline"], arrays["residual_rms"], conv, grid.t_0,
    )


# --------------------------------------------------------- point cloud --

@dataclass
class PointCloud:
    points: np.ndarray  # (N, 3) mm
    rows: np.ndarray
    cols: np.ndarray
    vx: np.ndarray
    vy: np.ndarray
    channels: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        n = len(self.points)
        self.rows = np.asarray(self.rows, dtype=int)
        self.cols = np.asarray(self.cols, dtype=int)
        self.vx = np.asarray(self.vx, dtype=float)
        self.vy = np.asarray(self.vy, dtype=float)
        if not (len(self.rows) == len(self.cols) == len(self.vx) == len(self.vy) == n):
            raise DomainError("point cloud columns differ in length")
        if not np.all(np.isfinite(self.points)):
            raise DomainError("point coordinates must be finite")
        if len(set(zip(self.rows.tolist(), self.cols.tolist()))) != n:
            raise DomainError("pixel provenance must be unique")
        for k, v in self.channels.items():
            if len(v) != n:
                raise DomainError(f"channel {k!r} has the wrong length")

    def __len__(self):
        return len(self.points)

    def subset(self, keep) -> "PointCloud":
        keep = np.asarray(keep)
        return PointCloud(self.points[keep], self.rows[keep], self.cols[keep], self.vx[keep], self.vy[keep], {k: v[keep] for k, v in self.channels.items()})

    def pixel_mask(self, mask2d) -> np.ndarray:
        """Per-point booleans picked out of a ``(rows, cols)`` pixel mask."""
        return np.asarray(mask2d, dtype=bool)[self.rows, self.cols]


def to_point_cloud(frame: ScanFrame, grid: ScanGrid, fused: np.ndarray | None = None) -> PointCloud:
    """Back-project converged pixels along their beam directions (pinhole model)."""
    rr, cc = np.nonzero(frame.converged & np.isfinite(frame.center))
    kx, ky = grid.volts_to_radians
    vx, vy = frame.vx[cc], frame.vy[rr]
    dirs = np.array([direction_from_angles(kx * a, ky * b) for a, b in zip(vx, vy)]).reshape(-1, 3)
    dist = tof_to_distance(frame.center[rr, cc], frame.t_0)
    pts = np.asarray(grid.aperture_origin, dtype=float) + dirs * np.asarray(dist).reshape(-1, 1)
    channels = {
        "peak_height": frame.amplitude[rr, cc],
        "fwhm_ps": frame.fwhm[rr, cc],
        "fused": (np.asarray(fused)[rr, cc] if fused is not None else np.full(len(rr), np.nan)),
    }
    return PointCloud(pts, rr, cc, vx, vy, channels)


def write_cloud_csv(cloud: PointCloud, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CLOUD_COLUMNS)
        for i in range(len(cloud)):
            x, y, z = cloud.points[i]
            w.writerow(
                [int(cloud.rows[i]), int(cloud.cols[i]), repr(float(x)), repr(float(y)), repr(float(z))]
                + [repr(float(cloud.channels.get(k, np.full(len(cloud), np.nan))[i])) for k in ("peak_height", "fwhm_ps", "fused")]
            )


def read_cloud_csv(path, grid: ScanGrid | None = None) -> PointCloud:
    """Load a cloud; scan voltages come from ``grid`` or, without one, from the mirror angles of each point."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        if next(reader, None) != CLOUD_COLUMNS:
            raise ValueError(f"{path}: not a point-cloud CSV")
        recs = [r for r in reader]
    a = np.array([[float(v) for v in r] for r in recs]).reshape(-1, 8)
    rows, cols, pts = a[:, 0].astype(int), a[:, 1].astype(int), a[:, 2:5]
    if grid is not None:
        vx, vy = np.array(grid.vx_values)[cols], np.array(grid.vy_values)[rows]
    else:
        rel = pts
        d = rel / np.linalg.norm(rel, axis=1)[:, None]
        vx, vy = np.arcsin(np.clip(d[:, 0], -1, 1)), np.arctan2(d[:, 1], d[:, 2])
    return PointCloud(pts, rows, cols, vx, vy, {"peak_height": a[:, 5], "fwhm_ps": a[:, 6], "fused": a[:, 7]})


# ----------------------------------------------------------- plane fit --

@dataclass(frozen=True)
class PlaneFit:
    normal: tuple[float, float, float]  # unit, oriented away from the scanner (n_z >= 0)
    offset: float  # n . p for points p on the plane, mm
    rms: float
    inlier_count: int

    def signed_distance(self, points) -> np.ndarray:
        return np.asarray(points, dtype=float) @ np.asarray(self.normal) - self.offset


def _select(cloud_or_points, mask):
    if isinstance(cloud_or_points, PointCloud):
        pts = cloud_or_points.points
        if mask is not None:
            mask = np.asarray(mask, dtype=bool)
            keep = cloud_or_points.pixel_mask(mask) if mask.ndim == 2 else mask
            pts = pts[keep]
        return pts
    pts = np.asarray(cloud_or_points, dtype=float).reshape(-1, 3)
    return pts if mask is None else pts[np.asarray(mask, dtype=bool)]


def fit_plane(cloud, mask=None) -> PlaneFit:
    """Total-least-squares plane through the (optionally masked) points."""
    pts = _select(cloud, mask)
    if len(pts) < 3:
        raise DomainError("a plane needs at least 3 points")
    centroid = pts.mean(axis=0)
    _, s, vt = np.linalg.svd(pts - centroid, full_matrices=False)
    scale = max(s[0], 1e-300)
    if len(s) < 2 or s[1] <= 1e-10 * scale:
        raise DomainError("points are collinear or coincident")
    n = vt[-1]
    if n[2] < 0 or (n[2] == 0 and (n[1] < 0 or (n[1] == 0 and n[0] < 0))):
        n = -n
    d = (pts - centroid) @ n
    return PlaneFit(tuple(float(v) for v in n), float(n @ centroid), float(np.sqrt(np.mean(d * d))), len(pts))


@dataclass
class ResidualDistribution:
    delta: np.ndarray  # signed orthogonal distances, mm
    fit: FitResult
    fwhm: float  # mm
    bin_width: float  # mm
    edges: np.ndarray
    counts: np.ndarray


DEFAULT_RESIDUAL_BIN = 0.05  # mm


def robust_fwhm(x) -> float:
    """Gaussian-equivalent FWHM from the median absolute deviation."""
    x = np.asarray(x, dtype=float)
    mad = np.median(np.abs(x - np.median(x)))
    return float(FWHM_PER_SIGMA * 1.482602218505602 * mad)


def residual_distribution(cloud, plane: PlaneFit, mask=None, bin_width: float | None = None) -> ResidualDistribution:
    """Histogram of plane residuals with a Gaussian fit.

    The default bin is 0.05 mm, narrowed to a tenth of the robust FWHM when
    the distribution is sharper than 0.5 mm so the fit keeps ten bins across
    the peak.
    """
    delta = plane.signed_distance(_select(cloud, mask))
    if delta.size < 3:
        raise InsufficientDataError("too few residuals")
    if bin_width is None:
        rf = robust_fwhm(delta)
        bin_width = DEFAULT_RESIDUAL_BIN if rf <= 0 else min(DEFAULT_RESIDUAL_BIN, rf / 10.0)
    lo = math.floor(delta.min() / bin_width) - 5
    hi = math.floor(delta.max() / bin_width) + 6
    edges = bin_width * np.arange(lo, hi + 1)
    counts = np.bincount(np.floor(delta / bin_width).astype(np.int64) - lo, minlength=hi - lo)[: hi - lo]
    centres = 0.5 * (edges[:-1] + edges[1:])
    try:
        fit = fit_gaussian_xy(centres, counts, bin_width=bin_width)
    except InsufficientDataError:
        fit = FitResult.failed(float(delta.size))
    return ResidualDistribution(delta, fit, float(fit.fwhm), float(bin_width), edges, counts)


# ------------------------------------------------------------ delaunay --

def _circumcircles(p: np.ndarray, tri: np.ndarray):
    a, b, c = p[tri[:, 0]], p[tri[:, 1]], p[tri[:, 2]]
    bx, by = b[:, 0] - a[:, 0], b[:, 1] - a[:, 1]
    cx, cy = c[:, 0] - a[:, 0], c[:, 1] - a[:, 1]
    d = 2.0 * (bx * cy - by * cx)
    b2, c2 = bx * bx + by * by, cx * cx + cy * cy
    with np.errstate(divide="ignore", invalid="ignore"):
        ux = (cy * b2 - by * c2) / d
        uy = (bx * c2 - cx * b2) / d
    return np.column_stack([a[:, 0] + ux, a[:, 1] + uy]), ux * ux + uy * uy


def _orient(p, tri):
    a, b, c = p[tri[:, 0]], p[tri[:, 1]], p[tri[:, 2]]
    return (b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0])


DELAUNAY_TOL = 1e-12


def delaunay(points2d) -> np.ndarray:
    """Bowyer-Watson triangulation; returns CCW index triples in canonical order.

    Points are sorted lexicographically before insertion, so the result does
    not depend on input order. Cocircular configurations are resolved by a
    strict in-circle test with relative tolerance ``DELAUNAY_TOL``.
    """
    pts = np.asarray(points2d, dtype=float).reshape(-1, 2)
    n = len(pts)
    if n < 3:
        raise DomainError("triangulation needs at least 3 points")
    order = np.lexsort((pts[:, 1], pts[:, 0]))
    if len(np.unique(pts, axis=0)) != n:
        raise DomainError("duplicate points")
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    scale = float(max(hi - lo))
    if scale == 0:
        raise DomainError("points are coincident")
    q = (pts[order] - lo) / scale  # similarity transform keeps Delaunay-ness
    centred = q - q.mean(axis=0)
    if np.linalg.svd(centred, compute_uv=False)[1] <= 1e-12 * max(1.0, np.abs(centred).max()):
        raise DomainError("points are collinear")

    big = 1e4  # super-triangle half-size in unit-box coordinates
    allp = np.vstack([q, [[-big, -big], [big, -big], [0.5, big]]])
    cap = 2 * n + 16
    tri = np.zeros((cap, 3), dtype=np.int64)
    cc = np.zeros((cap, 2))
    r2 = np.zeros(cap)
    alive = np.zeros(cap, dtype=bool)
    tri[0] = (n, n + 1, n + 2)
    cc[:1], r2[:1] = _circumcircles(allp, tri[:1])
    alive[0] = True
    free: list[int] = []
    top = 1
    for i in range(n):
        p = allp[i]
        d2 = np.sum((cc[:top] - p) ** 2, axis=1)
        bad = np.nonzero(alive[:top] & (d2 < r2[:top] * (1.0 - DELAUNAY_TOL)))[0]
        if bad.size == 0:
            raise InvariantError("point lies in no circumcircle; input too ill-conditioned")
        edges: dict[tuple[int, int], tuple[int, int]] = {}
        for t in bad:
            a, b, c = tri[t]
            for e in ((a, b), (b, c), (c, a)):
                key = (min(e), max(e))
                if key in edges:
                    del edges[key]
                else:
                    edges[key] = e
        alive[bad] = False
        free.extend(bad.tolist())
        new = np.array([(a, b, i) for a, b in edges.values()], dtype=np.int64)
        slots = []
        for _ in range(len(new)):
            if free:
                slots.append(free.pop())
            else:
                if top == cap:
                    cap *= 2
                    tri = np.resize(tri, (cap, 3))
                    cc = np.resize(cc, (cap, 2))
                    r2 = np.resize(r2, cap)
                    alive = np.concatenate([alive, np.zeros(cap - len(alive), dtype=bool)])
                slots.append(top)
                top += 1
        slots = np.array(slots, dtype=np.int64)
        tri[slots] = new
        cc[slots], r2[slots] = _circumcircles(allp, new)
        alive[slots] = True
    out = tri[:top][alive[:top]]
    out = out[np.all(out < n, axis=1)]
    out = out[_orient(allp, out) > 0]
    out = order[out]  # back to caller's indices
    # canonical form: rotate each triangle so its smallest index leads, then sort rows
    k = np.argmin(out, axis=1)
    out = np.stack([out[np.arange(len(out)), (k + j) % 3] for j in range(3)], axis=1)
    return out[np.lexsort((out[:, 2], out[:, 1], out[:, 0]))]


# ---------------------------------------------------------------- mesh --

@dataclass
class Mesh:
    vertices: np.ndarray  # (N, 3)
    triangles: np.ndarray  # (M, 3)
    colors: np.ndarray  # (N, 3) uint8

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=float).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        self.colors = np.asarray(self.colors, dtype=np.uint8).reshape(-1, 3)
        if len(self.triangles) and (self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices)):
            raise DomainError("triangle index out of range")


def median_spacing(points) -> float:
    pts = np.asarray(points, dtype=float)
    d, _ = cKDTree(pts).query(pts, k=2)
    return float(np.median(d[:, 1]))


def load_colormap(name: str = "grayscale") -> np.ndarray:
    """A named 256-entry RGB lookup table shipped with the package."""
    res = resources.files("snspd_lidar").joinpath("data", f"{name}.csv")
    if not res.is_file():
        raise KeyError(f"unknown colormap {name!r}")
    with res.open("r") as fh:
        reader = csv.reader(fh)
        next(reader)
        lut = np.array([[int(v) for v in r[1:4]] for r in reader], dtype=np.uint8)
    return lut


def apply_colormap(values, name: str = "grayscale") -> np.ndarray:
    lut = load_colormap(name)
    v = np.asarray(values, dtype=float)
    finite = np.isfinite(v)
    out = np.zeros((len(v), 3), dtype=np.uint8)
    if np.any(finite):
        lo, hi = v[finite].min(), v[finite].max()
        x = np.zeros(int(finite.sum())) if hi == lo else (v[finite] - lo) / (hi - lo)
        idx = np.clip(np.rint(x * (len(lut) - 1)), 0, len(lut) - 1).astype(int)
        out[finite] = lut[idx]
    return out


def triangulate(cloud: PointCloud, max_edge: float | None = None, channel: str = "peak_height", colormap: str = "grayscale") -> Mesh:
    """Delaunay in scan-voltage space lifted to 3D; long-edged triangles are dropped."""
    if len(cloud) < 3:
        raise DomainError("triangulation needs at least 3 points")
    tri = delaunay(np.column_stack([cloud.vx, cloud.vy]))
    p = cloud.points
    if max_edge is None and len(cloud) > 3:
        max_edge = 3.0 * median_spacing(p)
    if len(tri):
        a, b, c = p[tri[:, 0]], p[tri[:, 1]], p[tri[:, 2]]
        longest = np.max(np.stack([np.linalg.norm(a - b, axis=1), np.linalg.norm(b - c, axis=1), np.linalg.norm(c - a, axis=1)]), axis=0)
        area = 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)
        keep = area > 1e-12 * np.maximum(longest, 1e-300) ** 2
        if max_edge is not None:
            keep &= longest <= max_edge
        tri = tri[keep]
    values = cloud.channels.get(channel, np.zeros(len(cloud)))
    return Mesh(p, tri, apply_colormap(values, colormap))


def write_ply(mesh: Mesh, path) -> None:
    with open(path, "w", newline="\n") as fh:
        fh.write("ply\nformat ascii 1.0\n")
        fh.write(f"element vertex {len(mesh.vertices)}\n")
        fh.write("property float x\nproperty float y\nproperty float z\n")
        fh.write("property uchar red\nproperty uchar green\nproperty uchar blue\n")
        fh.write(f"element face {len(mesh.triangles)}\n")
        fh.write("property list uchar int vertex_indices\nend_header\n")
        for (x, y, z), (r, g, b) in zip(mesh.vertices.tolist(), mesh.colors.tolist()):
            fh.write(f"{x:.6f} {y:.6f} {z:.6f} {r} {g} {b}\n")
        for a, b, c in mesh.triangles.tolist():
            fh.write(f"3 {a} {b} {c}\n")


def read_ply(path) -> Mesh:
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != "ply":
        raise ValueError(f"{path}: not a PLY file")
    nv = nf = 0
    k = 0
    for k, line in enumerate(lines):
        if line.startswith("element vertex"):
            nv = int(line.split()[2])
        elif line.startswith("element face"):
            nf = int(line.split()[2])
        elif line == "end_header":
            break
    body = lines[k + 1 :]
    v = np.array([[float(x) for x in s.split()] for s in body[:nv]]).reshape(-1, 6)
    f = np.array([[int(x) for x in s.split()[1:4]] for s in body[nv : nv + nf]]).reshape(-1, 3)
    return Mesh(v[:, :3], f, v[:, 3:].astype(np.uint8))
