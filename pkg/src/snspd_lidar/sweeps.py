"""Study orchestration: bias sweeps, the plate resolution study and the n-bar sweep.

Each study writes plot-ready CSVs to ``out/<study_id>/`` plus a ``manifest.txt``
holding the config hash, the seed, reported values and file checksums.
"""
from __future__ import annotations

import csv
import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .acquisition import AcquisitionConfig, scan
from .config import Config
from .detector import SNSPD1, SNSPD2, SNSPD2_NBAR_BIAS, DetectorModel, NbarPoint, detector_jitter, jitter_vs_nbar, ocde, sweep_window
from .errors import DomainError, InsufficientDataError, InvariantError
from .fitting import EmgFit, analyze_waveform, emg_pdf, fit_emg, fit_gaussian_xy
from .geometry import ScanFrame, fit_plane, residual_distribution, to_point_cloud
from .rng import stream
from .scene import PLATE_FLAT_X_MAX, ScanGrid, calibration_plate_scene
from .units import sigma_from_fwhm, tof_to_distance

Progress = Callable[[str], None]


def derive_seed(master_seed: int, *key: int) -> int:
    return int(np.random.SeedSequence(int(master_seed), spawn_key=tuple(key)).generate_state(1, dtype=np.uint64)[0] >> 1)


# ------------------------------------------------------------- reports --

@dataclass
class StudyReport:
    study_id: str
    parameters: list[tuple[str, float | str]] = field(default_factory=list)
    artifacts: list[Path] = field(default_factory=list)

    def value(self, name: str):
        for k, v in self.parameters:
            if k == name:
                return v
        raise KeyError(name)


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_manifest(report: StudyReport, out_dir, config_digest: str, seed: int) -> Path:
    """Manifest with no timestamps or absolute paths, so reruns compare byte for byte."""
    out_dir = Path(out_dir)
    for p in report.artifacts:
        if not Path(p).is_file():
            raise InvariantError(f"claimed output {p} does not exist")
    lines = [f"study = {report.study_id}", f"config_sha256 = {config_digest}", f"seed = {seed}", "", "[values]"]
    lines += [f"{k} = {_fmt(v)}" for k, v in report.parameters]
    lines += ["", "[files]"]
    lines += [f"{sha256_file(p)}  {Path(p).relative_to(out_dir).as_posix()}" for p in sorted(report.artifacts, key=lambda q: Path(q).as_posix())]
    path = out_dir / "manifest.txt"
    path.write_text("\n".join(lines) + "\n")
    return path


def read_manifest_values(path) -> dict[str, str]:
    values, section = {}, None
    for line in Path(path).read_text().splitlines():
        if line.startswith("["):
            section = line.strip("[]")
        elif section == "values" and " = " in line:
            k, v = line.split(" = ", 1)
            values[k] = v
    return values


def write_table(path, header: Sequence[str], rows) -> Path:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])
    return Path(path)


def violations_of_monotone(values, errors, increasing: bool, k: float = 3.0) -> list[int]:
    """Indices ``i`` where step ``i -> i+1`` goes the wrong way by more than ``k`` combined sigma."""
    v, e = np.asarray(values, float), np.asarray(errors, float)
    step = np.diff(v) if increasing else -np.diff(v)
    tol = k * np.hypot(e[1:], e[:-1])
    return [int(i) for i in np.nonzero(step < -tol)[0]]


# ----------------------------------------------------------- bias sweep --

@dataclass
class BiasPoint:
    i_bias: float
    x: float
    ocde: float
    ocde_err: float
    jitter_fwhm: float
    jitter_err: float
    detections: int


def bias_sweep(det: DetectorModel, bias_grid: Sequence[float], photons_per_point: int, rng: np.random.Generator, min_counts: int = 200) -> list[BiasPoint]:
    """Monte-Carlo OCDE and fitted single-photon jitter at each bias current.

    ``photons_per_point`` single photons are sent per point; each detection
    carries a Gaussian latency with the detector's jitter at that bias.
    """
    out = []
    for ib in bias_grid:
        ib = float(ib)
        eta = ocde(det, ib)
        k = int(rng.binomial(photons_per_point, eta))
        p = k / photons_per_point
        err = math.sqrt(max(p * (1 - p), 1.0 / photons_per_point) / photons_per_point)
        fwhm, ferr = math.nan, math.nan
        if ib > 0 and k >= min_counts:
            lat = sigma_from_fwhm(detector_jitter(det, ib)) * rng.standard_normal(k)
            lo, hi = math.floor(lat.min()), math.ceil(lat.max()) + 1
            edges = np.arange(lo, hi + 1, 1.0)
            counts = np.histogram(lat, bins=edges)[0]
            try:
                fit = fit_gaussian_xy(0.5 * (edges[:-1] + edges[1:]), counts)
                if fit.converged:
                    fwhm, ferr = fit.fwhm, fit.fwhm_err
            except InsufficientDataError:
                pass
        out.append(BiasPoint(ib, ib / det.i_switch, p, err, fwhm, ferr, k))
    return out


def default_bias_grid(det: DetectorModel, points: int) -> np.ndarray:
    x = np.union1d(np.linspace(0.0, 1.0, points), [0.95])
    return x * det.i_switch


# ----------------------------------------------------------- n-bar sweep --

def nbar_grid(nmin: float = 0.01, nmax: float = 1000.0, per_decade: int = 25, extra: Sequence[float] = (545.0,)) -> np.ndarray:
    """Log grid with ``per_decade`` steps per decade, both ends included, plus ``extra``."""
    lo, hi = math.log10(nmin), math.log10(nmax)
    n = int(round((hi - lo) * per_decade)) + 1
    return np.unique(np.concatenate([np.logspace(lo, hi, n), np.asarray(extra, dtype=float)]))


@dataclass
class NbarSweep:
    points: list[NbarPoint]
    edges: np.ndarray
    density: np.ndarray  # (latency bins, n-bar points); every column sums to 1

    @property
    def nbar(self) -> np.ndarray:
        return np.array([p.nbar for p in self.points])


def nbar_sweep(
    det: DetectorModel = SNSPD2,
    i_bias: float = SNSPD2_NBAR_BIAS,
    grid: Sequence[float] | None = None,
    pulses_per_point: int = 100_000,
    rng: np.random.Generator | None = None,
    extra_jitter_fwhm: float | None = None,
    min_detections: int = 100_000,
    min_branch_counts: int = 5_000,
) -> NbarSweep:
    """Jitter against n-bar with per-n-bar normalised latency histograms.

    Every point is run to at least ``min_detections`` detections; a branch
    with fewer than ``min_branch_counts`` events is reported as not fitted.
    """
    if grid is None:
        grid = nbar_grid()
    if rng is None:
        rng = stream(0)
    if extra_jitter_fwhm is None:
        a = AcquisitionConfig()
        extra_jitter_fwhm = math.sqrt(a.tdc_jitter_fwhm**2 + a.sync_jitter_fwhm**2 + a.laser_pulse_fwhm**2)
    window = sweep_window(det, i_bias, max(grid), extra_jitter_fwhm)
    pts = jitter_vs_nbar(
        det, i_bias, grid, pulses_per_point, rng, extra_jitter_fwhm=extra_jitter_fwhm,
        min_detections=min_detections, min_branch_counts=min_branch_counts, window=window,
    )
    edges = np.arange(window[0], window[1] + 0.5, 1.0)
    dens = np.zeros((len(edges) - 1, len(pts)))
    for j, p in enumerate(pts):
        s = p.counts.sum()
        if s > 0:
            dens[:, j] = p.counts / s
    return NbarSweep(pts, edges, dens)


# ----------------------------------------------------- resolution study --

def resolution_grid(distance: float, rows: int, flat_cols: int, feature_cols: int, k: float) -> ScanGrid:
    """Scan grid over the calibration plate: ``flat_cols`` columns land on the flat section for every row."""
    y_half = 90.0
    ty = math.atan(y_half / distance)
    vy = np.linspace(-ty, ty, rows) / k
    # x on the plate is distance * tan(tx) / cos(ty): keep a 4 mm beam margin at the worst row
    flat_hi = math.atan((PLATE_FLAT_X_MAX - 4.0) * math.cos(ty) / distance)
    flat_lo = math.atan(-115.0 / distance)
    vx = list(np.linspace(flat_lo, flat_hi, flat_cols) / k)
    if feature_cols:
        vx += list(np.linspace(math.atan((PLATE_FLAT_X_MAX + 8.0) / distance), math.atan(116.0 / distance), feature_cols) / k)
    return ScanGrid(tuple(vx), tuple(vy), (k, k))


@dataclass
class ResolutionRun:
    pulses: int
    frame: ScanFrame
    detections: np.ndarray  # per pixel, in-window
    flat_mask: np.ndarray
    plane_fwhm: float  # mm
    plane_rms: float
    mean_detections: float
    residuals: object  # ResidualDistribution
    cloud: object
    plane: object


@dataclass
class ResolutionResult:
    grid: ScanGrid
    runs: list[ResolutionRun]
    emg: EmgFit
    jitter_values: np.ndarray
    slope: float
    intercept: float
    full_scale_detections: float
    extrapolated_fwhm: float

    @property
    def single_shot_resolution(self) -> float:
        return float(tof_to_distance(self.emg.mean))


def analyze_scan(result, method: str = "lsq", gate=None, min_prominence: float = 3.0, min_separation: float = 50.0, smooth_ps: float = 3.0) -> ScanFrame:
    fits = [analyze_waveform(p.waveform, gate, min_prominence, min_separation, smooth_ps, method) for p in result.pixels]
    return ScanFrame.from_fits(result.grid, fits)


def resolution_study(cfg: Config, seed: int, workers: int = 1, progress: Progress | None = None) -> ResolutionResult:
    st = cfg["study"]
    sc = cfg["scene"]
    grid = resolution_grid(sc["distance_mm"], st["resolution_rows"], st["resolution_flat_cols"], st["resolution_feature_cols"], cfg["scan"]["volts_to_radians"])
    scene = calibration_plate_scene(sc["distance_mm"])
    beam = cfg.beam()
    det = cfg.detector()
    base = cfg.acquisition()
    method = cfg["analysis"]["method"]
    runs = []
    for i, factor in enumerate(st["resolution_factors"]):
        pulses = int(round(st["resolution_pulses"] * factor))
        acq = _replace_acq(base, integration_time=pulses / base.rep_rate, nbar_at_target=st["resolution_nbar_at_target"], window_halfwidth=st["resolution_window_halfwidth_ps"])
        if progress:
            progress(f"resolution: scanning {grid.shape[0]}x{grid.shape[1]} pixels at {pulses} pulses")
        res = scan(scene, grid, beam, det, cfg.bias, acq, derive_seed(seed, 1, i), workers=workers, keep_tags=False)
        frame = analyze_scan(res, method)
        flat = np.array([p.flat_only for p in res.pixels]).reshape(grid.shape)
        dets = np.array([p.waveform.detections for p in res.pixels]).reshape(grid.shape)
        cloud = to_point_cloud(frame, grid)
        mask = flat & frame.converged
        plane = fit_plane(cloud, mask)
        rd = residual_distribution(cloud, plane, mask)
        runs.append(ResolutionRun(pulses, frame, dets, flat, rd.fwhm, plane.rms, float(dets[flat].mean()), rd, cloud, plane))
    single = next((r for r, f in zip(runs, st["resolution_factors"]) if f == 1.0), runs[0])
    jit = single.frame.fwhm[single.flat_mask & single.frame.converged]
    emg = fit_emg(jit, bin=0.5)
    n = np.array([r.mean_detections for r in runs])
    w = np.array([r.plane_fwhm for r in runs])
    if len(runs) >= 2 and np.all(np.isfinite(w)) and np.all(w > 0):
        slope, intercept = np.polyfit(np.log(n), np.log(w), 1)
    else:
        slope, intercept = math.nan, math.nan
    # detections per pixel the 100 ms, 10 MHz acquisition would collect at this detection rate
    full_scale_pulses = 1_000_000
    n_full = single.mean_detections * full_scale_pulses / single.pulses
    extrap = float(math.exp(intercept) * n_full**slope) if math.isfinite(slope) else math.nan
    return ResolutionResult(grid, runs, emg, jit, float(slope), float(intercept), float(n_full), extrap)


def _replace_acq(acq: AcquisitionConfig, **kw) -> AcquisitionConfig:
    from dataclasses import replace

    return replace(acq, **kw)


# ------------------------------------------------------------ run_study --

def run_study(name: str, cfg: Config, seed: int, out_root, workers: int = 1, progress: Progress | None = None) -> StudyReport:
    if name not in ("bias", "resolution", "nbar"):
        raise DomainError(f"unknown study {name!r}")
    out_dir = Path(out_root) / name
    out_dir.mkdir(parents=True, exist_ok=True)
    report = StudyReport(name)
    if name == "bias":
        _bias_outputs(cfg, seed, out_dir, report)
    elif name == "nbar":
        _nbar_outputs(cfg, seed, out_dir, report)
    else:
        _resolution_outputs(cfg, seed, out_dir, report, workers, progress)
    (out_dir / "effective-config.ini").write_text(cfg.text())
    report.artifacts.append(out_dir / "effective-config.ini")
    write_manifest(report, out_dir, cfg.digest(), seed)
    return report


def _bias_outputs(cfg: Config, seed: int, out_dir: Path, report: StudyReport) -> None:
    st = cfg["study"]
    configured = cfg.detector()
    for k, model in enumerate((SNSPD1, SNSPD2)):
        if model.name == configured.name:
            model = configured
        pts = bias_sweep(model, default_bias_grid(model, st["bias_points"]), st["photons_per_point"], stream(seed, 2, k))
        report.artifacts.append(
            write_table(
                out_dir / f"bias_{model.name}.csv",
                ["i_bias_ua", "i_bias_over_ic", "ocde", "ocde_err", "jitter_fwhm_ps", "jitter_err_ps", "detections"],
                [(p.i_bias, p.x, p.ocde, p.ocde_err, p.jitter_fwhm, p.jitter_err, p.detections) for p in pts],
            )
        )
        end = min(pts, key=lambda p: abs(p.x - 0.95))
        valid = [p for p in pts if math.isfinite(p.jitter_fwhm)]
        report.parameters += [
            (f"{model.name}_ocde_at_095", end.ocde),
            (f"{model.name}_jitter_at_095_ps", end.jitter_fwhm),
            (f"{model.name}_ocde_monotone", not violations_of_monotone([p.ocde for p in pts], [p.ocde_err for p in pts], True)),
            (f"{model.name}_jitter_monotone", not violations_of_monotone([p.jitter_fwhm for p in valid], [p.jitter_err for p in valid], False)),
        ]


def _nbar_outputs(cfg: Config, seed: int, out_dir: Path, report: StudyReport) -> None:
    st = cfg["study"]
    d = cfg["detector"]
    det = cfg.detector() if d["preset"] == "snspd2" else SNSPD2
    bias = d["bias_ua"] if d["preset"] == "snspd2" else SNSPD2_NBAR_BIAS
    acq = cfg.acquisition()
    extra = math.sqrt(acq.tdc_jitter_fwhm**2 + acq.sync_jitter_fwhm**2 + acq.laser_pulse_fwhm**2)
    grid = nbar_grid(st["nbar_min"], st["nbar_max"], st["points_per_decade"], st["nbar_extra"])
    sw = nbar_sweep(det, bias, grid, st["nbar_pulses_per_point"], stream(seed, 3), extra)
    rows = []
    for p in sw.points:
        rows.append(
            (p.nbar, p.pulses, p.detections, p.n1_count, p.multi_count,
             p.fit_all.fwhm, p.fit_all.fwhm_err, p.fit_all.center,
             p.fit_n1.fwhm, p.fit_n1.fwhm_err, p.fit_n1.center, p.fit_n1.center_err,
             p.fit_multi.fwhm, p.fit_multi.fwhm_err, p.fit_multi.center, p.fit_multi.center_err)
        )
    report.artifacts.append(
        write_table(
            out_dir / "nbar_jitter.csv",
            ["nbar", "pulses", "detections", "n1_count", "multi_count", "fwhm_all_ps", "fwhm_all_err", "center_all_ps",
             "fwhm_n1_ps", "fwhm_n1_err", "center_n1_ps", "center_n1_err", "fwhm_multi_ps", "fwhm_multi_err", "center_multi_ps", "center_multi_err"],
            rows,
        )
    )
    centres = 0.5 * (sw.edges[:-1] + sw.edges[1:])
    header = ["latency_ps"] + [_fmt(v) for v in sw.nbar]
    report.artifacts.append(write_table(out_dir / "nbar_density.csv", header, [[c, *row] for c, row in zip(centres, sw.density)]))
    summary = summarize_nbar(sw)
    report.parameters += list(summary.items())


def summarize_nbar(sw: NbarSweep) -> dict[str, float | bool]:
    pts = sw.points
    low = [p for p in pts if p.nbar <= 0.01 + 1e-12]
    at545 = min(pts, key=lambda p: abs(p.nbar - 545.0))
    multi = [p for p in pts if p.fit_multi.converged]
    n1 = [p for p in pts if p.fit_n1.converged]
    centres = np.array([p.fit_n1.center for p in n1])
    return {
        "fwhm_low_nbar_ps": low[0].fit_all.fwhm if low else math.nan,
        "fwhm_at_545_ps": at545.fit_all.fwhm,
        "nbar_nearest_545": at545.nbar,
        "fwhm_at_max_nbar_ps": max(pts, key=lambda p: p.nbar).fit_all.fwhm,
        "multi_fwhm_monotone_3sigma": not violations_of_monotone([p.fit_multi.fwhm for p in multi], [p.fit_multi.fwhm_err for p in multi], False),
        "n1_center_drift_ps": float(centres.max() - centres.min()) if centres.size else math.nan,
    }


def _resolution_outputs(cfg: Config, seed: int, out_dir: Path, report: StudyReport, workers: int, progress: Progress | None) -> None:
    r = resolution_study(cfg, seed, workers, progress)
    single = next((run for run, f in zip(r.runs, cfg["study"]["resolution_factors"]) if f == 1.0), r.runs[0])
    # single-shot jitter distribution with its EMG fit
    b = 0.5
    lo = math.floor(r.jitter_values.min() / b)
    hi = math.floor(r.jitter_values.max() / b) + 1
    edges = b * np.arange(lo, hi + 1)
    counts = np.histogram(r.jitter_values, bins=edges)[0]
    centres = 0.5 * (edges[:-1] + edges[1:])
    model = r.emg.amplitude * emg_pdf(centres, r.emg.mu, r.emg.sigma, r.emg.tail_rate) if math.isfinite(r.emg.amplitude) else np.full(len(centres), np.nan)
    report.artifacts.append(write_table(out_dir / "jitter_distribution.csv", ["fwhm_ps", "count", "emg_fit"], zip(centres, counts, model)))
    # point cloud, residual map and histogram from the longest integration
    big = r.runs[-1]
    cl = big.cloud
    flat_pt = cl.pixel_mask(big.flat_mask)
    report.artifacts.append(
        write_table(out_dir / "plane_points.csv", ["row", "col", "x_mm", "y_mm", "z_mm", "flat"],
                    [(int(a), int(c), *p, int(f)) for a, c, p, f in zip(cl.rows, cl.cols, cl.points, flat_pt)])
    )
    delta = big.plane.signed_distance(cl.points)
    report.artifacts.append(
        write_table(out_dir / "delta_d_map.csv", ["row", "col", "vx", "vy", "delta_mm", "flat"],
                    [(int(a), int(c), x, y, d, int(f)) for a, c, x, y, d, f in zip(cl.rows, cl.cols, cl.vx, cl.vy, delta, flat_pt)])
    )
    rd = big.residuals
    rc = 0.5 * (rd.edges[:-1] + rd.edges[1:])
    report.artifacts.append(write_table(out_dir / "delta_d_histogram.csv", ["delta_mm", "count", "gaussian_fit"], zip(rc, rd.counts, rd.fit.model(rc))))
    report.artifacts.append(
        write_table(out_dir / "scaling.csv", ["pulses", "integration_ms", "mean_detections", "plane_fwhm_mm", "plane_rms_mm"],
                    [(run.pulses, 1e3 * run.pulses / cfg["laser"]["rep_rate_hz"], run.mean_detections, run.plane_fwhm, run.plane_rms) for run in r.runs])
    )
    report.parameters += [
        ("flat_pixels", int(single.flat_mask.sum())),
        ("converged_flat_pixels", int((single.flat_mask & single.frame.converged).sum())),
        ("emg_mean_ps", r.emg.mean),
        ("emg_mu_ps", r.emg.mu),
        ("emg_sigma_ps", r.emg.sigma),
        ("emg_tau_ps", r.emg.tau),
        ("emg_converged", r.emg.converged),
        ("jitter_sample_mean_ps", r.emg.sample_mean),
        ("jitter_sample_std_ps", r.emg.sample_std),
        ("jitter_sem_ps", r.emg.sem),
        ("single_shot_resolution_mm", r.single_shot_resolution),
        ("multi_shot_fwhm_mm", big.plane_fwhm),
        ("scaling_slope", r.slope),
        ("full_scale_detections", r.full_scale_detections),
        ("extrapolated_fwhm_mm", r.extrapolated_fwhm),
    ]
