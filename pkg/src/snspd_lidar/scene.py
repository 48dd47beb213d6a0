"""Galvo scanning geometry, beam sub-ray sampling and ray casting against simple scenes.

Coordinates are millimetres with the scanner aperture at ``aperture_origin``
looking along +z. The first galvo mirror deflects the beam about the y axis
(x deflection), the second about the x axis; applying the rotations in that
order is what makes the scan pattern trapezoidal on a flat target.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DomainError
from .units import FWHM_PER_SIGMA, round_trip_ps

# weighted quantiles bracketing the central FWHM of a Gaussian
_Q_LO = 0.5 - 0.5 * math.erf(math.sqrt(math.log(2.0)))
_Q_HI = 1.0 - _Q_LO


@dataclass(frozen=True)
class ScanGrid:
    vx_values: tuple[float, ...]
    vy_values: tuple[float, ...]
    volts_to_radians: tuple[float, float] = (0.025, 0.025)
    aperture_origin: tuple[float, float, float] = (0.0, 0.0, 0.0)
    t_0: float = 0.0  # ps
    mirror_separation: float = 0.0  # mm between the x- and y-mirror pivots

    def __post_init__(self):
        object.__setattr__(self, "vx_values", tuple(float(v) for v in self.vx_values))
        object.__setattr__(self, "vy_values", tuple(float(v) for v in self.vy_values))
        k = self.volts_to_radians
        if np.ndim(k) == 0:
            object.__setattr__(self, "volts_to_radians", (float(k), float(k)))
        for name, vals in (("vx_values", self.vx_values), ("vy_values", self.vy_values)):
            if len(vals) == 0:
                raise DomainError(f"{name} must not be empty")
            if len(vals) > 1 and not np.all(np.diff(vals) > 0):
                raise DomainError(f"{name} must be strictly increasing")
        if min(self.volts_to_radians) <= 0:
            raise DomainError("volts_to_radians must be positive")
        if self.mirror_separation < 0:
            raise DomainError("mirror_separation must be >= 0")

    @classmethod
    def uniform(cls, vx_range, nx, vy_range, ny, **kw) -> "ScanGrid":
        return cls(tuple(np.linspace(*vx_range, nx)), tuple(np.linspace(*vy_range, ny)), **kw)

    @property
    def shape(self) -> tuple[int, int]:
        return (len(self.vy_values), len(self.vx_values))

    def pixel_voltages(self, row: int, col: int) -> tuple[float, float]:
        return self.vx_values[col], self.vy_values[row]


def mirror_angles(grid: ScanGrid, vx: float, vy: float) -> tuple[float, float]:
    tol = 1e-9
    if not (grid.vx_values[0] - tol <= vx <= grid.vx_values[-1] + tol and grid.vy_values[0] - tol <= vy <= grid.vy_values[-1] + tol):
        raise DomainError(f"voltages ({vx}, {vy}) outside the scan grid")
    return grid.volts_to_radians[0] * vx, grid.volts_to_radians[1] * vy


def direction_from_angles(theta_x: float, theta_y: float) -> np.ndarray:
    """``R_x(-theta_y) @ R_y(theta_x) @ z``, written out."""
    cx = math.cos(theta_x)
    return np.array([math.sin(theta_x), cx * math.sin(theta_y), cx * math.cos(theta_y)])


def voltages_to_direction(grid: ScanGrid, vx: float, vy: float) -> np.ndarray:
    return direction_from_angles(*mirror_angles(grid, vx, vy))


def beam_origin(grid: ScanGrid, vx: float, vy: float) -> tuple[np.ndarray, float]:
    """Exit point on the second mirror and the extra path length relative to boresight."""
    tx, _ = mirror_angles(grid, vx, vy)
    e = grid.mirror_separation
    origin = np.asarray(grid.aperture_origin, dtype=float) + np.array([e * math.tan(tx), 0.0, 0.0])
    return origin, e / math.cos(tx) - e


# --------------------------------------------------------------- scene --

@dataclass(frozen=True)
class Primitive:
    reflectivity: float = 1.0
    lobe: float = 1.0  # cosine-power exponent of the diffuse lobe

    def __post_init__(self):
        if not 0.0 <= self.reflectivity <= 1.0:
            raise DomainError(f"reflectivity must lie in [0, 1], got {self.reflectivity}")
        if self.lobe < 0:
            raise DomainError("lobe exponent must be >= 0")

    def intersect(self, origins: np.ndarray, dirs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Distances along each ray (inf on miss) and unit surface normals."""
        raise NotImplementedError

    def mirrored_x(self) -> "Primitive":
        raise NotImplementedError


_EPS = 1e-9


@dataclass(frozen=True)
class Plane(Primitive):
    point: tuple[float, float, float] = (0.0, 0.0, 510.0)
    normal: tuple[float, float, float] = (0.0, 0.0, -1.0)

    def intersect(self, origins, dirs):
        n = np.asarray(self.normal, dtype=float)
        n = n / np.linalg.norm(n)
        denom = dirs @ n
        with np.errstate(divide="ignore", invalid="ignore"):
            t = ((np.asarray(self.point) - origins) @ n) / denom
        t = np.where((np.abs(denom) > 1e-15) & (t > _EPS), t, np.inf)
        return t, np.broadcast_to(n, dirs.shape)

    def mirrored_x(self):
        p, n = self.point, self.normal
        return Plane(self.reflectivity, self.lobe, (-p[0], p[1], p[2]), (-n[0], n[1], n[2]))


@dataclass(frozen=True)
class Box(Primitive):
    lo: tuple[float, float, float] = (-1.0, -1.0, 0.0)
    hi: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def intersect(self, origins, dirs):
        lo, hi = np.asarray(self.lo, float), np.asarray(self.hi, float)
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / dirs
            t1 = (lo - origins) * inv
            t2 = (hi - origins) * inv
        tmin = np.where(np.isnan(t1), -np.inf, np.minimum(t1, t2))
        tmax = np.where(np.isnan(t1), np.inf, np.maximum(t1, t2))
        t_near = tmin.max(axis=1)
        t_far = tmax.min(axis=1)
        axis = tmin.argmax(axis=1)
        hit = (t_near <= t_far) & (t_near > _EPS)
        t = np.where(hit, t_near, np.inf)
        normals = np.zeros_like(dirs)
        rows = np.arange(len(dirs))
        normals[rows, axis] = -np.sign(dirs[rows, axis])
        return t, normals

    def mirrored_x(self):
        return Box(self.reflectivity, self.lobe, (-self.hi[0], self.lo[1], self.lo[2]), (-self.lo[0], self.hi[1], self.hi[2]))


@dataclass(frozen=True)
class Sphere(Primitive):
    center: tuple[float, float, float] = (0.0, 0.0, 510.0)
    radius: float = 10.0

    def intersect(self, origins, dirs):
        oc = origins - np.asarray(self.center, float)
        b = np.einsum("ij,ij->i", oc, dirs)
        c = np.einsum("ij,ij->i", oc, oc) - self.radius**2
        disc = b * b - c
        sq = np.sqrt(np.clip(disc, 0.0, None))
        t = -b - sq
        t = np.where(t > _EPS, t, -b + sq)
        t = np.where((disc >= 0) & (t > _EPS), t, np.inf)
        p = origins + np.where(np.isfinite(t), t, 0.0)[:, None] * dirs
        normals = (p - np.asarray(self.center, float)) / self.radius
        return t, normals

    def mirrored_x(self):
        c = self.center
        return Sphere(self.reflectivity, self.lobe, (-c[0], c[1], c[2]), self.radius)


@dataclass(frozen=True, eq=False)
class Heightfield(Primitive):
    """Relief ``z = base_z - h(x, y)``: heights point toward the scanner.

    ``heights[i, j]`` sits at ``(x0 + j*pitch, y0 + i*pitch)``; bilinear in between.
    """

    heights: np.ndarray = field(default_factory=lambda: np.zeros((2, 2)))
    x0: float = 0.0
    y0: float = 0.0
    pitch: float = 1.0
    base_z: float = 510.0

    def __post_init__(self):
        super().__post_init__()
        h = np.asarray(self.heights, dtype=float)
        if h.ndim != 2 or min(h.shape) < 2 or not np.all(np.isfinite(h)):
            raise DomainError("heightfield needs a finite matrix of at least 2x2 heights")
        if self.pitch <= 0:
            raise DomainError("heightfield pitch must be positive")
        object.__setattr__(self, "heights", h)

    @classmethod
    def from_csv(cls, path, **kw) -> "Heightfield":
        return cls(heights=np.loadtxt(path, delimiter=",", ndmin=2), **kw)

    def _h_and_grad(self, x, y):
        h = self.heights
        ny, nx = h.shape
        u = np.clip((x - self.x0) / self.pitch, 0.0, nx - 1 - 1e-12)
        v = np.clip((y - self.y0) / self.pitch, 0.0, ny - 1 - 1e-12)
        j, i = np.floor(u).astype(int), np.floor(v).astype(int)
        fu, fv = u - j, v - i
        h00, h01, h10, h11 = h[i, j], h[i, j + 1], h[i + 1, j], h[i + 1, j + 1]
        val = h00 * (1 - fu) * (1 - fv) + h01 * fu * (1 - fv) + h10 * (1 - fu) * fv + h11 * fu * fv
        dx = ((h01 - h00) * (1 - fv) + (h11 - h10) * fv) / self.pitch
        dy = ((h10 - h00) * (1 - fu) + (h11 - h01) * fu) / self.pitch
        return val, dx, dy

    def intersect(self, origins, dirs):
        ny, nx = self.heights.shape
        lo = np.array([self.x0, self.y0, self.base_z - self.heights.max()])
        hi = np.array([self.x0 + (nx - 1) * self.pitch, self.y0 + (ny - 1) * self.pitch, self.base_z - self.heights.min()])
        t_box, _ = Box(lo=tuple(lo), hi=tuple(hi + np.array([0, 0, 1e-9]))).intersect(origins, dirs)
        inside = np.all((origins >= lo) & (origins <= hi), axis=1)
        t_enter = np.where(inside, 0.0, t_box)
        t = np.full(len(dirs), np.inf)
        normals = np.zeros_like(dirs)
        cand = np.isfinite(t_enter)
        if not np.any(cand):
            return t, normals
        o, d, t0 = origins[cand], dirs[cand], t_enter[cand]
        diag = float(np.linalg.norm(hi - lo))
        step = self.pitch / 4.0
        n_steps = int(math.ceil(diag / step)) + 1

        def below(tt):
            p = o + tt[:, None] * d
            return p[:, 2] - (self.base_z - self._h_and_grad(p[:, 0], p[:, 1])[0])

        prev_t = t0.copy()
        prev_f = below(prev_t)
        found = np.where(prev_f >= 0, prev_t, np.inf)
        lo_t, hi_t = prev_t.copy(), prev_t.copy()
        active = prev_f < 0
        for k in range(1, n_steps + 1):
            if not np.any(active):
                break
            tt = t0 + k * step
            f = below(tt)
            crossed = active & (f >= 0)
            lo_t[crossed], hi_t[crossed] = prev_t[crossed], tt[crossed]
            found[crossed] = tt[crossed]
            active &= ~crossed
            prev_t = tt
        refine = np.isfinite(found) & (hi_t > lo_t)
        a, b = lo_t[refine], hi_t[refine]
        o_r, d_r = o[refine], d[refine]
        for _ in range(40):
            mid = 0.5 * (a + b)
            p = o_r + mid[:, None] * d_r
            f = p[:, 2] - (self.base_z - self._h_and_grad(p[:, 0], p[:, 1])[0])
            a, b = np.where(f < 0, mid, a), np.where(f < 0, b, mid)
        found[refine] = 0.5 * (a + b)
        p = o + np.where(np.isfinite(found), found, 0.0)[:, None] * d
        inside_xy = (p[:, 0] >= lo[0] - 1e-9) & (p[:, 0] <= hi[0] + 1e-9) & (p[:, 1] >= lo[1] - 1e-9) & (p[:, 1] <= hi[1] + 1e-9)
        found = np.where(inside_xy, found, np.inf)
        _, gx, gy = self._h_and_grad(p[:, 0], p[:, 1])
        nrm = -np.column_stack([gx, gy, np.ones_like(gx)])
        nrm /= np.linalg.norm(nrm, axis=1)[:, None]
        t[cand] = found
        normals[cand] = nrm
        return t, normals

    def mirrored_x(self):
        ny, nx = self.heights.shape
        return Heightfield(self.reflectivity, self.lobe, self.heights[:, ::-1].copy(), -(self.x0 + (nx - 1) * self.pitch), self.y0, self.pitch, self.base_z)


@dataclass(frozen=True)
class Scene:
    primitives: tuple[Primitive, ...]

    def __post_init__(self):
        object.__setattr__(self, "primitives", tuple(self.primitives))
        if not self.primitives:
            raise DomainError("a scene needs at least one primitive")

    def mirrored_x(self) -> "Scene":
        return Scene(tuple(p.mirrored_x() for p in self.primitives))

    def scaled_reflectivity(self, s: float) -> "Scene":
        from dataclasses import replace

        return Scene(tuple(replace(p, reflectivity=p.reflectivity * s) for p in self.primitives))

    def cast(self, origins: np.ndarray, dirs: np.ndarray):
        """Nearest hit per ray: distance (inf on miss), primitive index (-1) and normal."""
        best = np.full(len(dirs), np.inf)
        which = np.full(len(dirs), -1, dtype=int)
        normals = np.zeros_like(dirs)
        for k, prim in enumerate(self.primitives):
            t, n = prim.intersect(origins, dirs)
            closer = t < best
            best = np.where(closer, t, best)
            which[closer] = k
            normals[closer] = n[closer]
        return best, which, normals


# ---------------------------------------------------------------- beam --

@dataclass(frozen=True)
class BeamModel:
    spot_diameter_1e2: float = 2.0  # mm, 1/e^2 intensity diameter
    subrays_per_pixel: int = 64

    def __post_init__(self):
        if not self.spot_diameter_1e2 > 0:
            raise DomainError("spot diameter must be positive")
        if self.subrays_per_pixel < 1:
            raise DomainError("subrays_per_pixel must be >= 1")

    @property
    def sigma(self) -> float:
        """Per-axis standard deviation of the Gaussian intensity profile (mm)."""
        return self.spot_diameter_1e2 / 4.0

    def offsets(self, rng: np.random.Generator) -> np.ndarray:
        """Transverse sub-ray offsets drawn from the beam profile.

        Draws come in sign-symmetric quadruples (+-a, +-b) so the sampled
        beam is always centred and mirror symmetric; any remainder is the
        central ray.
        """
        n = self.subrays_per_pixel
        q = n // 4
        base = rng.standard_normal((q, 2)) * self.sigma
        signs = np.array([[1, 1], [-1, 1], [1, -1], [-1, -1]], dtype=float)
        sym = (base[:, None, :] * signs[None, :, :]).reshape(-1, 2)
        return np.vstack([sym, np.zeros((n - 4 * q, 2))])


@dataclass
class PixelGroundTruth:
    subray_ranges: np.ndarray  # mm, one-way apparent range of each hitting sub-ray
    subray_weights: np.ndarray  # reflectivity * cos^lobe(incidence); profile is importance-sampled
    hit_fraction: float
    n_subrays: int
    subray_primitive: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))

    @property
    def mean_weight(self) -> float:
        """Collected fraction relative to a unit-reflectivity normal hit of the whole beam."""
        return float(np.sum(self.subray_weights)) / self.n_subrays

    def only_hits(self, primitive: int) -> bool:
        return self.hit_fraction == 1.0 and bool(np.all(self.subray_primitive == primitive))


def _transverse_basis(d: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    ex, ey = np.array([1.0, 0.0, 0.0]), np.array([0.0, 1.0, 0.0])
    u = ex - (ex @ d) * d
    u /= np.linalg.norm(u)
    v = ey - (ey @ d) * d - (ey @ u) * u
    v /= np.linalg.norm(v)
    return u, v


def trace_pixel(scene: Scene, grid: ScanGrid, beam: BeamModel, vx: float, vy: float, rng: np.random.Generator) -> PixelGroundTruth:
    """Cast the collimated sub-rays of one pixel and record apparent ranges and weights."""
    d = voltages_to_direction(grid, vx, vy)
    origin, extra_path = beam_origin(grid, vx, vy)
    u, v = _transverse_basis(d)
    off = beam.offsets(rng)
    origins = origin + off[:, :1] * u + off[:, 1:] * v
    dirs = np.broadcast_to(d, origins.shape).copy()
    t, which, normals = scene.cast(origins, dirs)
    hit = np.isfinite(t)
    refl = np.array([p.reflectivity for p in scene.primitives])
    lobe = np.array([p.lobe for p in scene.primitives])
    idx = which[hit]
    cos_inc = np.abs(normals[hit] @ d)
    weights = refl[idx] * np.maximum(cos_inc, 0.0) ** lobe[idx]
    return PixelGroundTruth(
        subray_ranges=t[hit] + extra_path,
        subray_weights=weights,
        hit_fraction=float(hit.sum()) / len(t),
        n_subrays=len(t),
        subray_primitive=idx,
    )


def weighted_quantile(values, weights, q):
    order = np.argsort(values, kind="stable")
    v, w = np.asarray(values)[order], np.asarray(weights)[order]
    cw = np.cumsum(w) / np.sum(w)
    return v[np.minimum(np.searchsorted(cw, q, side="left"), len(v) - 1)]


def effective_target_spread(gt: PixelGroundTruth) -> float:
    """FWHM-equivalent spread (ps) of the weighted round-trip times of a pixel.

    Taken as the span between the weighted quantiles that bound the central
    FWHM of a Gaussian, so a Gaussian spread gives its FWHM and two equal
    delta modes give their separation.
    """
    if gt.hit_fraction <= 0 or gt.subray_ranges.size == 0 or np.sum(gt.subray_weights) <= 0:
        raise DomainError("pixel has no weighted hits")
    rt = round_trip_ps(gt.subray_ranges)
    lo, hi = weighted_quantile(rt, gt.subray_weights, [_Q_LO, _Q_HI])
    return float(hi - lo)


def weighted_rms_spread(gt: PixelGroundTruth) -> float:
    """``2.3548 *`` weighted standard deviation of the round-trip times (ps)."""
    rt = round_trip_ps(gt.subray_ranges)
    w = gt.subray_weights / np.sum(gt.subray_weights)
    m = np.sum(w * rt)
    return float(FWHM_PER_SIGMA * math.sqrt(np.sum(w * (rt - m) ** 2)))


# ------------------------------------------------------------- presets --

def flat_plane_scene(distance: float = 510.0, reflectivity: float = 0.8, lobe: float = 1.0) -> Scene:
    return Scene((Plane(reflectivity, lobe, (0.0, 0.0, distance), (0.0, 0.0, -1.0)),))


PLATE_FLAT_X_MAX = 80.0  # mm; features of the calibration plate start here


def calibration_plate_scene(distance: float = 510.0) -> Scene:
    """A 250 x 200 mm aluminium plate facing the scanner, with non-flat features on its +x strip.

    Primitive 0 is the flat plate; every other primitive is a non-flat section.
    """
    d = distance
    prims: list[Primitive] = [Box(0.8, 1.0, (-125.0, -100.0, d), (125.0, 100.0, d + 3.0))]
    # staircase of raised blocks and a dome
    for k, (y0, y1) in enumerate([(-100.0, -40.0), (-40.0, 20.0), (20.0, 100.0)]):
        prims.append(Box(0.7, 1.0, (PLATE_FLAT_X_MAX, y0, d - 5.0 * (k + 1)), (125.0, y1, d)))
    prims.append(Sphere(0.6, 1.0, (103.0, -10.0, d - 12.0), 14.0))
    return Scene(tuple(prims))


def objects_scene(distance: float = 510.0) -> Scene:
    """Centimetre-sized objects in front of a backdrop, for full-waveform imaging."""
    d = distance
    yy, xx = np.mgrid[0:41, 0:41]
    bump = 8.0 * np.exp(-(((xx - 20) ** 2 + (yy - 20) ** 2) / 60.0))
    return Scene(
        (
            Plane(0.5, 1.0, (0.0, 0.0, d + 20.0), (0.0, 0.0, -1.0)),
            Box(0.9, 1.0, (-45.0, -30.0, d - 15.0), (-15.0, 10.0, d + 20.0)),
            Sphere(0.35, 2.0, (20.0, 15.0, d), 15.0),
            Box(0.15, 1.0, (5.0, -40.0, d - 5.0), (45.0, -25.0, d + 20.0)),
            Heightfield(0.7, 1.0, bump, -40.0, 15.0, 1.0, d + 5.0),
        )
    )
