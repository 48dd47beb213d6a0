import math
import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from snspd_lidar.acquisition import (
    AcquisitionConfig,
    PixelWaveform,
    TimeTagStream,
    default_window,
    expected_latency,
    histogram,
    iter_tag_records,
    read_histogram_csv,
    read_tags_binary,
    read_tags_csv,
    scan,
    simulate_pixel,
    snr_db,
    write_histogram_csv,
    write_tags_binary,
    write_tags_csv,
)
from snspd_lidar.detector import SNSPD1, ocde
from snspd_lidar.errors import DomainError
from snspd_lidar.fitting import fit_gaussian, fit_gaussian_xy
from snspd_lidar.rng import stream
from snspd_lidar.scene import BeamModel, ScanGrid, calibration_plate_scene, flat_plane_scene, trace_pixel
from snspd_lidar.units import distance_to_tof

ON_AXIS = ScanGrid((0.0,), (0.0,), t_0=250.0)
QUIET = dict(tdc_jitter_fwhm=0.0, sync_jitter_fwhm=0.0, laser_pulse_fwhm=0.0, fiber_broadening_fwhm=0.0)


def fixed_jitter_detector(fwhm):
    """SNSPD1 with a photon-number independent response of the given FWHM."""
    return SNSPD1.with_overrides(single_photon_jitter=fwhm, jitter_floor=fwhm, latency_shift_per_e_fold=0.0)


def flat_truth(seed=0, subrays=16):
    return trace_pixel(flat_plane_scene(510.0), ON_AXIS, BeamModel(2.0, subrays), 0.0, 0.0, stream(seed))


def fitted_fwhm(tags, acq):
    c = float(np.median(tags.latency))
    wf = histogram(tags, acq, (math.floor(c) - 300.0, math.floor(c) + 300.0))
    return fit_gaussian(wf, method="poisson")


# ------------------------------------------------------------- config --


def test_config_validation():
    assert AcquisitionConfig().n_pulses == 1_000_000
    assert AcquisitionConfig().period_ps == pytest.approx(1e5)
    for bad in (dict(rep_rate=0.0), dict(tdc_bin=0.5), dict(tdc_jitter_fwhm=-1.0), dict(gate_duty=1.5), dict(ghosts=((10.0, -1.0),))):
        with pytest.raises(DomainError):
            AcquisitionConfig(**bad)


def test_stream_and_waveform_invariants():
    with pytest.raises(DomainError):
        TimeTagStream((0, 0), [3, 3], [1.0, 2.0], [1, 1])
    with pytest.raises(DomainError):
        PixelWaveform(1.0, 0.0, [1, 2], 2, 3)
    with pytest.raises(DomainError):
        PixelWaveform(1.0, 0.0, [1, 2], 10, 2)


# --------------------------------------------------------- simulation --


def test_no_light_no_tags():
    acq = AcquisitionConfig(nbar_at_target=0.0, integration_time=1e-3)
    tags = simulate_pixel(flat_truth(), SNSPD1, 20.0, acq, stream(1))
    assert len(tags) == 0


def test_too_short_integration():
    with pytest.raises(DomainError):
        simulate_pixel(flat_truth(), SNSPD1, 20.0, AcquisitionConfig(integration_time=1e-8), stream(1))


def test_delta_chain():
    acq = AcquisitionConfig(nbar_at_target=2.0, integration_time=1e-3, **QUIET)
    tags = simulate_pixel(flat_truth(), fixed_jitter_detector(0.0), 20.0, acq, stream(2), t_0=250.0)
    assert len(tags) > 500
    np.testing.assert_allclose(tags.latency, distance_to_tof(510.0) + 250.0, atol=1e-6)
    assert np.all(np.diff(tags.pulse_index) > 0)


def test_quoted_budget_on_flat_target():
    acq = AcquisitionConfig(nbar_at_target=0.02, integration_time=1.0)
    tags = simulate_pixel(flat_truth(3), SNSPD1, 20.0, acq, stream(3))
    assert len(tags) >= 100_000
    assert fitted_fwhm(tags, acq).fwhm == pytest.approx(27.6, abs=0.5)


@pytest.mark.parametrize("seed", range(5))
def test_quadrature_composition(seed):
    r = np.random.default_rng(seed)
    det_fwhm, laser, fiber, sync, tdc = r.uniform(2.0, 25.0, 5)
    acq = AcquisitionConfig(
        nbar_at_target=2.0,
        integration_time=0.015,
        laser_pulse_fwhm=laser,
        fiber_broadening_fwhm=fiber,
        sync_jitter_fwhm=sync,
        tdc_jitter_fwhm=tdc,
    )
    tags = simulate_pixel(flat_truth(seed), fixed_jitter_detector(det_fwhm), 20.0, acq, stream(seed, 7))
    assert len(tags) >= 100_000
    expect = math.sqrt(det_fwhm**2 + laser**2 + fiber**2 + sync**2 + tdc**2)
    assert fitted_fwhm(tags, acq).fwhm == pytest.approx(expect, rel=0.02)


def test_detection_probability_per_pixel():
    gt = flat_truth(4)
    acq = AcquisitionConfig(nbar_at_target=0.3, integration_time=0.01)
    n = acq.n_pulses
    tags = simulate_pixel(gt, SNSPD1, 20.0, acq, stream(4))
    nbar_px = acq.nbar_at_target * gt.subray_weights.sum() / gt.n_subrays
    p = -math.expm1(-ocde(SNSPD1, 20.0) * nbar_px)
    assert abs(len(tags) / n - p) < 3 * math.sqrt(p * (1 - p) / n)


def test_ghost_echo_appears_at_its_delay():
    acq = AcquisitionConfig(nbar_at_target=0.05, integration_time=0.02, ghosts=((600.0, 0.3),))
    tags = simulate_pixel(flat_truth(5), SNSPD1, 20.0, acq, stream(5))
    main = distance_to_tof(510.0)
    late = tags.latency[tags.latency > main + 300.0]
    early = tags.latency[tags.latency <= main + 300.0]
    assert abs(np.median(late) - (main + 600.0)) < 3.0
    assert len(late) / len(early) == pytest.approx(0.3, rel=0.1)


def gated_snr(duty, seed=6):
    acq = AcquisitionConfig(nbar_at_target=0.05, integration_time=0.1, background_rate=4e6, gate_duty=duty)
    gt = flat_truth(seed)
    tags = simulate_pixel(gt, SNSPD1, 20.0, acq, stream(seed))
    wf = histogram(tags, acq, default_window(expected_latency(gt), acq))
    fit = fit_gaussian(wf, method="poisson")
    assert fit.converged
    return snr_db(fit.amplitude, fit.baseline)


def test_gate_raises_snr():
    open_gate, half, gated = gated_snr(1.0), gated_snr(0.5), gated_snr(0.1)
    assert open_gate < half < gated
    assert gated - open_gate == pytest.approx(10.0, abs=1.0)


def test_snr_db():
    assert snr_db(100.0, 10.0) == pytest.approx(10.0)
    assert snr_db(5.0, 0.0) == math.inf


# ---------------------------------------------------------- histogram --


def test_histogram_empty():
    acq = AcquisitionConfig(integration_time=1e-4)
    wf = histogram(TimeTagStream.empty(), acq, (0.0, 16.0))
    assert wf.counts.tolist() == [0] * 16 and wf.detections == 0


def test_histogram_example():
    acq = AcquisitionConfig(integration_time=1e-5)
    tags = TimeTagStream((0, 0), [0, 1, 2], [100.2, 100.7, 101.3], [1, 1, 1])
    wf = histogram(tags, acq, (100.0, 102.0))
    assert wf.counts.tolist() == [2, 1]
    np.testing.assert_allclose(wf.bin_centers(), [100.5, 101.5])


def test_histogram_rejects_misaligned_window():
    acq = AcquisitionConfig(integration_time=1e-5)
    for w in ((10.0, 10.0), (10.5, 20.5), (10.0, 20.5)):
        with pytest.raises(DomainError):
            histogram(TimeTagStream.empty(), acq, w)


def test_count_conservation_1000_streams():
    rng = np.random.default_rng(11)
    acq = AcquisitionConfig(integration_time=1e-4, tdc_bin=2.0)
    for _ in range(1000):
        k = int(rng.integers(0, 60))
        lat = rng.uniform(-50.0, 250.0, k)
        tags = TimeTagStream((0, 0), np.arange(k), lat, np.ones(k, dtype=int))
        lo, hi = 2.0 * int(rng.integers(-10, 20)), 2.0 * int(rng.integers(25, 100))
        wf = histogram(tags, acq, (lo, hi))
        recount = [0] * len(wf.counts)
        for t in lat:
            if lo <= t < hi:
                recount[int((t - lo) // 2.0)] += 1
        assert wf.counts.tolist() == recount
        assert wf.detections == sum(1 for t in lat if lo <= t < hi)


def test_default_window_snaps_outward():
    acq = AcquisitionConfig(tdc_bin=4.0, window_halfwidth=10.0)
    assert default_window(101.0, acq) == (88.0, 112.0)


# --------------------------------------------------------------- scan --


SMALL_GRID = ScanGrid.uniform((-1, 1), 2, (-1, 1), 2)


def small_scan(workers, seed=5, keep_tags=True):
    acq = AcquisitionConfig(integration_time=2e-4)
    return scan(calibration_plate_scene(), SMALL_GRID, BeamModel(2.0, 8), SNSPD1, 20.0, acq, seed, workers=workers, keep_tags=keep_tags)


def test_scan_shape_and_order():
    res = small_scan(1)
    assert len(res.pixels) == 4
    assert [(p.row, p.col) for p in res.pixels] == [(0, 0), (0, 1), (1, 0), (1, 1)]
    assert res.pixel(1, 0).tags.pixel_id == (1, 0)
    assert all(p.flat_only and p.hit_fraction == 1.0 for p in res.pixels)
    assert small_scan(1, keep_tags=False).pixels[0].tags is None


def test_scan_independent_of_workers():
    a, b = small_scan(1), small_scan(8)
    for pa, pb in zip(a.pixels, b.pixels):
        np.testing.assert_array_equal(pa.waveform.counts, pb.waveform.counts)
        np.testing.assert_array_equal(pa.tags.latency, pb.tags.latency)
    c = small_scan(1, seed=6)
    assert any(not np.array_equal(pa.tags.latency, pc.tags.latency) for pa, pc in zip(a.pixels, c.pixels))


def test_scan_progress():
    seen = []
    acq = AcquisitionConfig(integration_time=1e-5)
    scan(flat_plane_scene(), SMALL_GRID, BeamModel(2.0, 4), SNSPD1, 20.0, acq, 0, progress=lambda i, n: seen.append((i, n)))
    assert seen == [(1, 2), (2, 2)]


def test_desk_scale_scan_speed():
    grid = ScanGrid.uniform((-9, 9), 64, (-7, 7), 64)
    acq = AcquisitionConfig(integration_time=1e-3)  # 10^4 pulses per pixel
    start = time.perf_counter()
    res = scan(calibration_plate_scene(), grid, BeamModel(), SNSPD1, 20.0, acq, 1, keep_tags=False)
    elapsed = time.perf_counter() - start
    assert len(res.pixels) == 4096
    assert elapsed < 60.0


# -------------------------------------------------------------- files --


def sample_stream():
    return simulate_pixel(flat_truth(), SNSPD1, 20.0, AcquisitionConfig(nbar_at_target=0.5, integration_time=1e-4), stream(12))


def test_tag_csv_round_trip(tmp_path):
    s = sample_stream()
    write_tags_csv(s, tmp_path / "t.csv")
    assert (tmp_path / "t.csv").read_text().splitlines()[0] == "pulse_index,latency_ps,n_absorbed"
    back = read_tags_csv(tmp_path / "t.csv")
    assert back.tags == s.tags


def test_tag_binary_round_trip(tmp_path):
    s = sample_stream()
    p = tmp_path / "t.bin"
    write_tags_binary(s, p)
    raw = p.read_bytes()
    assert raw[:4] == b"PCTT" and raw[4:6] == b"\x01\x00"
    assert len(raw) == 6 + 20 * len(s)
    assert read_tags_binary(p).tags == s.tags
    assert [(int(a), b, int(c)) for a, b, c in iter_tag_records(p)] == s.tags


def test_tag_binary_rejects_garbage(tmp_path):
    p = tmp_path / "bad.bin"
    p.write_bytes(b"NOPE\x01\x00")
    with pytest.raises(ValueError):
        read_tags_binary(p)
    p.write_bytes(b"PCTT\x01\x00" + b"\x00" * 7)
    with pytest.raises(ValueError):
        read_tags_binary(p)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(0, 5), min_size=2, max_size=40), st.integers(-50, 50))
def test_histogram_file_round_trip(tmp_path_factory, counts, start):
    wf = PixelWaveform(1.0, float(start), counts, sum(counts) + 3, sum(counts))
    p = tmp_path_factory.mktemp("h") / "h.csv"
    write_histogram_csv(wf, p)
    back = read_histogram_csv(p, 1.0, wf.pulses_fired)
    assert back.counts.tolist() == list(counts)
    assert back.bin_start == wf.bin_start and back.pulses_fired == wf.pulses_fired


def test_fit_of_simulated_flat_pixel_recovers_range():
    acq = AcquisitionConfig(nbar_at_target=0.05, integration_time=0.02)
    gt = flat_truth(13)
    tags = simulate_pixel(gt, SNSPD1, 20.0, acq, stream(13))
    wf = histogram(tags, acq, default_window(expected_latency(gt), acq))
    fit = fit_gaussian_xy(wf.bin_centers(), wf.counts, 1.0)
    assert fit.converged
    assert fit.center == pytest.approx(distance_to_tof(510.0), abs=0.5)
