import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from snspd_lidar.acquisition import AcquisitionConfig, expected_latency, scan
from snspd_lidar.detector import SNSPD1
from snspd_lidar.errors import DomainError
from snspd_lidar.fitting import FitResult
from snspd_lidar.geometry import (
    Mesh,
    PointCloud,
    ScanFrame,
    apply_colormap,
    delaunay,
    fit_plane,
    load_colormap,
    median_spacing,
    read_cloud_csv,
    read_fit_csv,
    read_ply,
    residual_distribution,
    robust_fwhm,
    to_point_cloud,
    triangulate,
    write_cloud_csv,
    write_fit_csv,
    write_ply,
)
from snspd_lidar.rng import stream
from snspd_lidar.scene import BeamModel, ScanGrid, flat_plane_scene, trace_pixel
from snspd_lidar.sweeps import analyze_scan
from snspd_lidar.units import distance_to_tof, tof_to_distance


def fit_at(center, converged=True, amp=100.0, fwhm=27.6):
    return FitResult(amp, center, fwhm, 0.0, 0.0, converged, 3)


def cloud_from(points, vx=None, vy=None):
    pts = np.asarray(points, dtype=float)
    n = len(pts)
    vx = pts[:, 0] if vx is None else vx
    vy = pts[:, 1] if vy is None else vy
    return PointCloud(pts, np.arange(n), np.zeros(n, int), vx, vy, {"peak_height": np.arange(n, dtype=float)})


# ---------------------------------------------------------- point cloud --


def test_boresight_pixel():
    g = ScanGrid((0.0,), (0.0,), t_0=120.0)
    frame = ScanFrame.from_fits(g, [fit_at(distance_to_tof(510.0, 120.0))])
    cloud = to_point_cloud(frame, g)
    np.testing.assert_allclose(cloud.points, [[0.0, 0.0, 510.0]], atol=1e-9)


def test_non_converged_pixels_dropped():
    g = ScanGrid.uniform((-1, 1), 3, (-1, 1), 2)
    fits = [fit_at(3402.0, converged=(i % 2 == 0)) for i in range(6)]
    fits[2] = FitResult.failed()
    cloud = to_point_cloud(ScanFrame.from_fits(g, fits), g)
    assert len(cloud) == 2
    assert set(zip(cloud.rows.tolist(), cloud.cols.tolist())) == {(0, 0), (1, 1)}


def test_frame_needs_all_pixels():
    with pytest.raises(DomainError):
        ScanFrame.from_fits(ScanGrid.uniform((-1, 1), 2, (-1, 1), 2), [fit_at(1.0)])


def test_simulated_plane_lies_at_its_distance():
    g = ScanGrid.uniform((-4, 4), 5, (-3, 3), 4)
    acq = AcquisitionConfig(integration_time=0.01)
    res = scan(flat_plane_scene(510.0), g, BeamModel(2.0, 16), SNSPD1, 20.0, acq, 3, keep_tags=False)
    frame = analyze_scan(res)
    cloud = to_point_cloud(frame, g)
    assert len(cloud) == 20
    n = np.array([p.waveform.detections for p in res.pixels]).reshape(g.shape)[cloud.rows, cloud.cols]
    sigma_multi = tof_to_distance(27.6 / 2.35482) / np.sqrt(n)
    assert np.all(np.abs(cloud.points[:, 2] - 510.0) < 5 * sigma_multi)


def test_mirror_separation_distortion_peaks_at_edges():
    """A pinhole back-projection of a two-mirror scanner bends a flat target."""
    spans = []
    for e in (10.0, 20.0):
        g = ScanGrid.uniform((-9, 9), 19, (-7, 7), 15, mirror_separation=e)
        fits = []
        for r in range(15):
            for c in range(19):
                gt = trace_pixel(flat_plane_scene(510.0), g, BeamModel(2.0, 4), *g.pixel_voltages(r, c), stream(0))
                fits.append(fit_at(expected_latency(gt)))
        cloud = to_point_cloud(ScanFrame.from_fits(g, fits), g)
        d = fit_plane(cloud).signed_distance(cloud.points).reshape(15, 19)
        r, c = np.unravel_index(np.argmax(np.abs(d)), d.shape)
        assert r in (0, 14) or c in (0, 18)
        spans.append(d.max() - d.min())
    assert spans[1] == pytest.approx(2 * spans[0], rel=0.02)


def test_cloud_csv_round_trip(tmp_path):
    g = ScanGrid.uniform((-2, 2), 3, (-1, 1), 2, t_0=10.0)
    fits = [fit_at(3400.0 + i, amp=50.0 + i) for i in range(6)]
    frame = ScanFrame.from_fits(g, fits)
    cloud = to_point_cloud(frame, g, fused=np.arange(6.0).reshape(2, 3))
    write_cloud_csv(cloud, tmp_path / "c.csv")
    back = read_cloud_csv(tmp_path / "c.csv", g)
    np.testing.assert_array_equal(back.points, cloud.points)
    np.testing.assert_array_equal(back.vx, cloud.vx)
    for k in ("peak_height", "fwhm_ps", "fused"):
        np.testing.assert_array_equal(back.channels[k], cloud.channels[k])
    write_fit_csv(frame, tmp_path / "f.csv")
    again = read_fit_csv(tmp_path / "f.csv", g)
    np.testing.assert_array_equal(again.center, frame.center)
    np.testing.assert_array_equal(again.converged, frame.converged)


def test_cloud_invariants():
    with pytest.raises(DomainError):
        PointCloud([[0, 0, 1], [0, 0, 2]], [0, 0], [1, 1], [0, 1], [0, 1])
    with pytest.raises(DomainError):
        PointCloud([[0, 0, np.nan]], [0], [0], [0], [0])


# ------------------------------------------------------------ plane fit --


def test_plane_through_four_corners():
    n = np.array([1.0, 2.0, 2.0]) / 3.0
    u = np.cross(n, [1.0, 0, 0])
    u /= np.linalg.norm(u)
    v = np.cross(n, u)
    pts = [5.0 * n + a * u + b * v for a, b in ((0, 0), (3, 0), (0, 2), (3, 2))]
    pf = fit_plane(np.array(pts))
    assert pf.rms == pytest.approx(0.0, abs=1e-12)
    assert abs(np.dot(pf.normal, n)) == pytest.approx(1.0, abs=1e-12)
    assert pf.offset == pytest.approx(5.0)
    assert pf.inlier_count == 4


def test_plane_noise_level():
    rng = np.random.default_rng(5)
    xy = rng.uniform(-100, 100, (10_000, 2))
    pts = np.column_stack([xy, 510.0 + 0.1 * xy[:, 0]])
    pts += rng.normal(0.0, 0.3, pts.shape)
    assert fit_plane(pts).rms == pytest.approx(0.3, abs=0.02)


def test_plane_mask():
    xy = np.array([(x, y) for x in range(5) for y in range(4)], dtype=float)
    pts = np.column_stack([xy, np.full(20, 500.0)])
    cloud = PointCloud(pts, xy[:, 1].astype(int), xy[:, 0].astype(int), xy[:, 0], xy[:, 1])
    mask = np.ones((4, 5), dtype=bool)
    mask[:, 4] = False
    assert fit_plane(cloud).inlier_count == 20
    assert fit_plane(cloud, mask).inlier_count == 16
    assert fit_plane(cloud, np.arange(20) < 7).inlier_count == 7


def test_plane_degenerate():
    with pytest.raises(DomainError):
        fit_plane(np.array([[0, 0, 0], [1, 1, 1], [2, 2, 2], [3, 3, 3.0]]))
    with pytest.raises(DomainError):
        fit_plane(np.zeros((2, 3)))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31))
def test_plane_rotation_invariance(seed):
    rng = np.random.default_rng(seed)
    xy = rng.uniform(-50, 50, (200, 2))
    pts = np.column_stack([xy, 0.2 * xy[:, 1] + rng.normal(0, 0.4, 200)])
    rot = Rotation.random(random_state=seed)
    a = fit_plane(pts)
    b = fit_plane(rot.apply(pts))
    assert b.rms == pytest.approx(a.rms, rel=1e-9)
    assert abs(np.dot(b.normal, rot.apply(a.normal))) == pytest.approx(1.0, abs=1e-9)


def test_noiseless_residuals_sharper_than_bin():
    xy = np.array([(x, y) for x in range(20) for y in range(20)], dtype=float)
    pts = np.column_stack([xy, 510.0 + 0.05 * xy[:, 0]])
    dist = residual_distribution(pts, fit_plane(pts))
    assert np.all(np.abs(dist.delta) < 1e-9)
    assert robust_fwhm(dist.delta) < dist.bin_width
    assert not dist.fit.converged or dist.fwhm < dist.bin_width


def test_residual_distribution_fwhm():
    rng = np.random.default_rng(6)
    xy = rng.uniform(-50, 50, (20_000, 2))
    pts = np.column_stack([xy, rng.normal(510.0, 0.3, 20_000)])
    dist = residual_distribution(pts, fit_plane(pts))
    assert dist.bin_width == 0.05
    assert dist.fit.converged
    assert dist.fwhm == pytest.approx(2.35482 * 0.3, rel=0.03)
    assert robust_fwhm(dist.delta) == pytest.approx(2.35482 * 0.3, rel=0.03)
    assert dist.counts.sum() == 20_000


# -------------------------------------------------------------- delaunay --


def cross2(u, v):
    return u[..., 0] * v[..., 1] - u[..., 1] * v[..., 0]


def in_circle(p, a, b, c):
    """>0 when p is strictly inside the circumcircle of the CCW triangle abc."""
    m = np.array([[a[0] - p[0], a[1] - p[1], (a[0] - p[0]) ** 2 + (a[1] - p[1]) ** 2],
                  [b[0] - p[0], b[1] - p[1], (b[0] - p[0]) ** 2 + (b[1] - p[1]) ** 2],
                  [c[0] - p[0], c[1] - p[1], (c[0] - p[0]) ** 2 + (c[1] - p[1]) ** 2]])
    return np.linalg.det(m)


def test_three_points():
    tri = delaunay([[0, 0], [1, 0], [0, 1]])
    assert tri.tolist() == [[0, 1, 2]]


def test_regular_grid_count():
    xy = np.array([(x, y) for x in range(10) for y in range(10)], dtype=float)
    tri = delaunay(xy)
    assert len(tri) == 162
    area = 0.5 * np.abs(cross2(xy[tri[:, 1]] - xy[tri[:, 0]], xy[tri[:, 2]] - xy[tri[:, 0]]))
    assert area.sum() == pytest.approx(81.0)


def test_empty_circumcircles_200_points():
    pts = np.random.default_rng(7).uniform(-3, 5, (200, 2))
    tri = delaunay(pts)
    for a, b, c in tri:
        for i in range(len(pts)):
            if i not in (a, b, c):
                assert in_circle(pts[i], pts[a], pts[b], pts[c]) <= 1e-9
    # Euler: 2n - 2 - hull vertices
    from scipy.spatial import ConvexHull

    assert len(tri) == 2 * 200 - 2 - len(ConvexHull(pts).vertices)


def test_local_delaunay_edge_flip():
    pts = np.random.default_rng(8).normal(size=(150, 2))
    tri = delaunay(pts)
    owners: dict[tuple[int, int], list[int]] = {}
    for k, t in enumerate(tri):
        for e in ((t[0], t[1]), (t[1], t[2]), (t[2], t[0])):
            owners.setdefault((min(e), max(e)), []).append(k)
    shared = [v for v in owners.values() if len(v) == 2]
    assert shared
    for k1, k2 in shared:
        t1, t2 = tri[k1], tri[k2]
        opposite = (set(t2.tolist()) - set(t1.tolist())).pop()
        assert in_circle(pts[opposite], *pts[t1]) <= 1e-12


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31))
def test_order_independence(seed):
    rng = np.random.default_rng(seed)
    pts = rng.uniform(0, 1, (40, 2))
    perm = rng.permutation(40)
    a = delaunay(pts)
    b = perm[delaunay(pts[perm])]
    canon = lambda t: sorted(tuple(sorted(r)) for r in t.tolist())  # noqa: E731
    assert canon(a) == canon(b)


def test_triangles_are_ccw():
    pts = np.random.default_rng(9).uniform(0, 1, (50, 2))
    tri = delaunay(pts)
    a, b, c = pts[tri[:, 0]], pts[tri[:, 1]], pts[tri[:, 2]]
    assert np.all(cross2(b - a, c - a) > 0)


def test_delaunay_rejects_degenerate():
    with pytest.raises(DomainError):
        delaunay([[0, 0], [1, 1], [2, 2], [3, 3]])
    with pytest.raises(DomainError):
        delaunay([[0, 0], [1, 0]])
    with pytest.raises(DomainError):
        delaunay([[0, 0], [1, 0], [1, 0], [0, 1]])


# ------------------------------------------------------------------ mesh --


def test_triangulate_three_points():
    cloud = cloud_from([[0, 0, 500], [1, 0, 500], [0, 1, 500]])
    mesh = triangulate(cloud)
    assert mesh.triangles.shape == (1, 3)


def test_triangulate_drops_long_edges():
    xy = np.array([(x, y) for x in range(6) for y in range(6)], dtype=float)
    z = np.where(xy[:, 0] >= 3, 600.0, 500.0)  # a 100 mm step between columns 2 and 3
    cloud = cloud_from(np.column_stack([xy, z]))
    full = triangulate(cloud, max_edge=1e9)
    gapped = triangulate(cloud)
    assert len(full.triangles) == 50
    assert len(gapped.triangles) == 50 - 10
    assert median_spacing(cloud.points) == pytest.approx(1.0)


def test_colormap():
    lut = load_colormap()
    assert lut.shape == (256, 3)
    np.testing.assert_array_equal(lut[:, 0], np.arange(256))
    rgb = apply_colormap([1.0, 2.0, np.nan, 3.0])
    assert rgb[:, 0].tolist() == [0, 128, 0, 255]
    with pytest.raises(KeyError):
        load_colormap("viridis-ish")


def test_ply_round_trip(tmp_path):
    xy = np.random.default_rng(10).uniform(-5, 5, (30, 2))
    cloud = cloud_from(np.column_stack([xy, 500.0 + xy[:, 0]]))
    mesh = triangulate(cloud, max_edge=1e9)
    write_ply(mesh, tmp_path / "m.ply")
    text = (tmp_path / "m.ply").read_text()
    assert "element vertex 30" in text and "property uchar red" in text
    back = read_ply(tmp_path / "m.ply")
    np.testing.assert_allclose(back.vertices, mesh.vertices, atol=1e-6)
    np.testing.assert_array_equal(back.triangles, mesh.triangles)
    np.testing.assert_array_equal(back.colors, mesh.colors)


def test_mesh_index_check():
    with pytest.raises(DomainError):
        Mesh(np.zeros((3, 3)), [[0, 1, 3]], np.zeros((3, 3)))
