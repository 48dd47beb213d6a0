"""Pulse-train acquisition: time tags, TDC histograms, scans and their file formats."""
from __future__ import annotations

import csv
import math
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from .detector import DetectorModel, sample_pulses
from .errors import DomainError
from .rng import pixel_stream
from .scene import BeamModel, PixelGroundTruth, ScanGrid, Scene, trace_pixel
from .units import round_trip_ps, sigma_from_fwhm

TAG_MAGIC = b"PCTT"
TAG_VERSION = 1
_TAG_RECORD = struct.Struct("<QdI")


@dataclass(frozen=True)
class AcquisitionConfig:
    rep_rate: float = 10e6  # Hz
    integration_time: float = 0.1  # s
    tdc_bin: float = 1.0  # ps
    tdc_jitter_fwhm: float = 1.5
    sync_jitter_fwhm: float = 1.0
    laser_pulse_fwhm: float = 0.1
    # propagation broadening that closes the 27.6 ps budget on a flat target
    fiber_broadening_fwhm: float = 14.03
    background_rate: float = 0.0  # counts/s before gating
    gate_duty: float = 0.1  # EOM gate: fraction of background that passes
    nbar_at_target: float = 0.05
    window_halfwidth: float = 2000.0  # ps around the expected target latency
    ghosts: tuple[tuple[float, float], ...] = ()  # (delay ps, amplitude relative to the target)

    def __post_init__(self):
        object.__setattr__(self, "ghosts", tuple((float(d), float(a)) for d, a in self.ghosts))
        if not self.rep_rate > 0:
            raise DomainError("rep_rate must be positive")
        if self.integration_time < 0:
            raise DomainError("integration_time must be >= 0")
        if not self.tdc_bin >= 1.0:
            raise DomainError("tdc_bin must be at least 1 ps")
        for name in ("tdc_jitter_fwhm", "sync_jitter_fwhm", "laser_pulse_fwhm", "fiber_broadening_fwhm"):
            if not getattr(self, name) >= 0:
                raise DomainError(f"{name} must be >= 0")
        if self.background_rate < 0 or self.nbar_at_target < 0:
            raise DomainError("background_rate and nbar_at_target must be >= 0")
        if not 0.0 <= self.gate_duty <= 1.0:
            raise DomainError("gate_duty must lie in [0, 1]")
        if not self.window_halfwidth > 0:
            raise DomainError("window_halfwidth must be positive")
        if any(a < 0 for _, a in self.ghosts):
            raise DomainError("ghost amplitudes must be >= 0")

    @property
    def n_pulses(self) -> int:
        return int(math.floor(self.rep_rate * self.integration_time * (1 + 1e-12)))

    @property
    def period_ps(self) -> float:
        return 1e12 / self.rep_rate

    @property
    def chain_fwhm(self) -> float:
        """Quadrature sum of the Gaussian chain stages after the detector."""
        return math.sqrt(self.laser_pulse_fwhm**2 + self.fiber_broadening_fwhm**2 + self.sync_jitter_fwhm**2 + self.tdc_jitter_fwhm**2)


@dataclass
class TimeTagStream:
    pixel_id: tuple[int, int]
    pulse_index: np.ndarray
    latency: np.ndarray
    n_absorbed: np.ndarray

    def __post_init__(self):
        self.pulse_index = np.asarray(self.pulse_index, dtype=np.int64)
        self.latency = np.asarray(self.latency, dtype=float)
        self.n_absorbed = np.asarray(self.n_absorbed, dtype=np.int64)
        if not (len(self.pulse_index) == len(self.latency) == len(self.n_absorbed)):
            raise DomainError("tag columns differ in length")
        if len(self.pulse_index) > 1 and not np.all(np.diff(self.pulse_index) > 0):
            raise DomainError("pulse indices must be strictly increasing")

    def __len__(self):
        return len(self.pulse_index)

    @property
    def tags(self) -> list[tuple[int, float, int]]:
        return list(zip(self.pulse_index.tolist(), self.latency.tolist(), self.n_absorbed.tolist()))

    @classmethod
    def empty(cls, pixel_id=(0, 0)) -> "TimeTagStream":
        return cls(pixel_id, np.zeros(0, np.int64), np.zeros(0), np.zeros(0, np.int64))


@dataclass
class PixelWaveform:
    bin_width: float
    bin_start: float
    counts: np.ndarray
    pulses_fired: int
    detections: int

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if np.any(self.counts < 0):
            raise DomainError("histogram counts must be >= 0")
        if int(self.counts.sum()) != self.detections or self.detections > self.pulses_fired:
            raise DomainError("histogram needs sum(counts) = detections <= pulses_fired")

    def bin_centers(self) -> np.ndarray:
        return self.bin_start + self.bin_width * (np.arange(len(self.counts)) + 0.5)

    @property
    def window(self) -> tuple[float, float]:
        return self.bin_start, self.bin_start + self.bin_width * len(self.counts)


# ---------------------------------------------------------- simulation --

def _earliest_per_pulse(pulse, lat, n):
    order = np.lexsort((lat, pulse))
    pulse, lat, n = pulse[order], lat[order], n[order]
    first = np.ones(len(pulse), dtype=bool)
    first[1:] = pulse[1:] != pulse[:-1]
    return pulse[first], lat[first], n[first]


def simulate_pixel(
    gt: PixelGroundTruth,
    det: DetectorModel,
    i_bias: float,
    acq: AcquisitionConfig,
    rng: np.random.Generator,
    t_0: float = 0.0,
    pixel_id: tuple[int, int] = (0, 0),
) -> TimeTagStream:
    """Time tags for one pixel over ``acq.n_pulses`` laser pulses.

    Each fired pulse picks a sub-ray with probability proportional to its
    weight; its round trip, the detector offset and independent Gaussian draws
    for pulse width, propagation, sync and TDC make up the tag. Ghost echoes
    and gated background compete per pulse and the earliest tag wins.
    """
    n_pulses = acq.n_pulses
    if n_pulses < 1:
        raise DomainError("integration time too short for a single pulse")
    pulses, lats, ns = [], [], []
    w = np.asarray(gt.subray_weights, dtype=float)
    total = float(w.sum())
    nbar_px = acq.nbar_at_target * total / gt.n_subrays if gt.n_subrays else 0.0
    returns = [(0.0, 1.0)] + list(acq.ghosts)
    for delay, amp in returns:
        if nbar_px * amp <= 0 or total <= 0:
            continue
        idx, n, offset = sample_pulses(det, i_bias, nbar_px * amp, n_pulses, rng)
        k = len(idx)
        if k == 0:
            continue
        pick = rng.choice(len(w), size=k, p=w / total) if len(w) > 1 else np.zeros(k, dtype=int)
        lat = round_trip_ps(gt.subray_ranges[pick]) + t_0 + delay + offset
        for fwhm in (acq.laser_pulse_fwhm, acq.fiber_broadening_fwhm, acq.sync_jitter_fwhm, acq.tdc_jitter_fwhm):
            if fwhm > 0:
                lat = lat + sigma_from_fwhm(fwhm) * rng.standard_normal(k)
        pulses.append(idx)
        lats.append(lat)
        ns.append(n)
    mu_bg = acq.background_rate * acq.gate_duty / acq.rep_rate
    if mu_bg > 0:
        k = int(rng.binomial(n_pulses, -math.expm1(-mu_bg)))
        idx = np.sort(rng.choice(n_pulses, size=k, replace=False))
        pulses.append(idx.astype(np.int64))
        lats.append(rng.uniform(0.0, acq.period_ps, size=k))
        ns.append(np.zeros(k, dtype=np.int64))
    if not pulses:
        return TimeTagStream.empty(pixel_id)
    p, lat, n = _earliest_per_pulse(np.concatenate(pulses), np.concatenate(lats), np.concatenate(ns))
    return TimeTagStream(pixel_id, p, lat, n)


def expected_latency(gt: PixelGroundTruth, t_0: float = 0.0) -> float:
    """Weight-averaged round trip of the pixel plus ``t_0`` (``t_0`` alone for misses)."""
    w = np.asarray(gt.subray_weights)
    if w.size == 0 or w.sum() <= 0:
        return t_0
    return float(np.sum(w * round_trip_ps(gt.subray_ranges)) / w.sum()) + t_0


def default_window(center: float, acq: AcquisitionConfig) -> tuple[float, float]:
    """``+-window_halfwidth`` around ``center``, snapped outward to the TDC bin grid."""
    b = acq.tdc_bin
    return b * math.floor((center - acq.window_halfwidth) / b), b * math.ceil((center + acq.window_halfwidth) / b)


def histogram(stream: TimeTagStream, acq: AcquisitionConfig, window: tuple[float, float]) -> PixelWaveform:
    lo, hi = window
    b = acq.tdc_bin
    n_bins = (hi - lo) / b
    if not hi > lo or abs(n_bins - round(n_bins)) > 1e-9 or abs(lo / b - round(lo / b)) > 1e-9:
        raise DomainError(f"window {window} is empty or not aligned to the {b} ps bin grid")
    n_bins = int(round(n_bins))
    idx = np.floor((stream.latency - lo) / b).astype(np.int64)
    idx = idx[(idx >= 0) & (idx < n_bins)]
    counts = np.bincount(idx, minlength=n_bins)
    return PixelWaveform(b, float(lo), counts, max(acq.n_pulses, int(counts.sum())), int(counts.sum()))


def snr_db(amplitude: float, baseline: float) -> float:
    """Peak-over-background ratio in dB (inf for a zero baseline)."""
    if baseline <= 0:
        return math.inf
    return 10.0 * math.log10(amplitude / baseline)


# ---------------------------------------------------------------- scan --

@dataclass
class PixelRecord:
    row: int
    col: int
    vx: float
    vy: float
    waveform: PixelWaveform
    tags: TimeTagStream | None
    hit_fraction: float
    true_range: float  # weighted mean sub-ray range, mm (nan on miss)
    flat_only: bool  # every sub-ray hit primitive 0


@dataclass
class ScanResult:
    grid: ScanGrid
    pixels: list[PixelRecord] = field(default_factory=list)

    def pixel(self, row: int, col: int) -> PixelRecord:
        return self.pixels[row * self.grid.shape[1] + col]

    def waveforms(self) -> list[PixelWaveform]:
        return [p.waveform for p in self.pixels]


@dataclass(frozen=True)
class _ScanJob:
    scene: Scene
    grid: ScanGrid
    beam: BeamModel
    det: DetectorModel
    i_bias: float
    acq: AcquisitionConfig
    master_seed: int
    keep_tags: bool


def _run_pixel(job: _ScanJob, row: int, col: int) -> PixelRecord:
    rng = pixel_stream(job.master_seed, row, col)
    vx, vy = job.grid.pixel_voltages(row, col)
    gt = trace_pixel(job.scene, job.grid, job.beam, vx, vy, rng)
    tags = simulate_pixel(gt, job.det, job.i_bias, job.acq, rng, t_0=job.grid.t_0, pixel_id=(row, col))
    wf = histogram(tags, job.acq, default_window(expected_latency(gt, job.grid.t_0), job.acq))
    w = gt.subray_weights
    true_range = float(np.sum(w * gt.subray_ranges) / w.sum()) if w.size and w.sum() > 0 else math.nan
    return PixelRecord(row, col, vx, vy, wf, tags if job.keep_tags else None, gt.hit_fraction, true_range, gt.only_hits(0))


def _run_rows(job: _ScanJob, rows: list[int]) -> list[PixelRecord]:
    ncols = job.grid.shape[1]
    return [_run_pixel(job, r, c) for r in rows for c in range(ncols)]


def scan(
    scene: Scene,
    grid: ScanGrid,
    beam: BeamModel,
    det: DetectorModel,
    i_bias: float,
    acq: AcquisitionConfig,
    master_seed: int,
    workers: int = 1,
    keep_tags: bool = True,
    progress: Callable[[int, int], None] | None = None,
) -> ScanResult:
    """Simulate every pixel of ``grid``; row-major, identical for any ``workers``."""
    job = _ScanJob(scene, grid, beam, det, i_bias, acq, int(master_seed), keep_tags)
    nrows = grid.shape[0]
    result = ScanResult(grid)
    if workers <= 1 or nrows == 1:
        for r in range(nrows):
            result.pixels.extend(_run_rows(job, [r]))
            if progress:
                progress(r + 1, nrows)
        return result
    chunks = [list(range(r, min(r + 4, nrows))) for r in range(0, nrows, 4)]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        for k, part in enumerate(pool.map(_run_rows, [job] * len(chunks), chunks)):
            result.pixels.extend(part)
            if progress:
                progress(chunks[k][-1] + 1, nrows)
    return result


# ------------------------------------------------------------- file I/O --

def write_tags_csv(stream: TimeTagStream, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["pulse_index", "latency_ps", "n_absorbed"])
        for p, t, n in zip(stream.pulse_index.tolist(), stream.latency.tolist(), stream.n_absorbed.tolist()):
            w.writerow([p, repr(t), n])


def read_tags_csv(path, pixel_id=(0, 0)) -> TimeTagStream:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["pulse_index", "latency_ps", "n_absorbed"]:
        raise ValueError(f"{path}: not a time-tag CSV")
    body = rows[1:]
    return TimeTagStream(
        pixel_id,
        np.array([int(r[0]) for r in body], dtype=np.int64),
        np.array([float(r[1]) for r in body]),
        np.array([int(r[2]) for r in body], dtype=np.int64),
    )


def write_tags_binary(stream: TimeTagStream, path) -> None:
    rec = np.empty(len(stream), dtype=np.dtype([("p", "<u8"), ("t", "<f8"), ("n", "<u4")]))
    rec["p"], rec["t"], rec["n"] = stream.pulse_index, stream.latency, stream.n_absorbed
    with open(path, "wb") as fh:
        fh.write(TAG_MAGIC + struct.pack("<H", TAG_VERSION))
        fh.write(rec.tobytes())


def read_tags_binary(path, pixel_id=(0, 0)) -> TimeTagStream:
    data = Path(path).read_bytes()
    if data[:4] != TAG_MAGIC:
        raise ValueError(f"{path}: bad magic")
    (version,) = struct.unpack("<H", data[4:6])
    if version != TAG_VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    body = data[6:]
    if len(body) % _TAG_RECORD.size:
        raise ValueError(f"{path}: truncated record")
    rec = np.frombuffer(body, dtype=np.dtype([("p", "<u8"), ("t", "<f8"), ("n", "<u4")]))
    return TimeTagStream(pixel_id, rec["p"].astype(np.int64), rec["t"].astype(float), rec["n"].astype(np.int64))


def write_histogram_csv(wf: PixelWaveform, path) -> None:
    """Nonzero bins only, plus the first and last bins so the window survives a round trip."""
    keep = wf.counts > 0
    keep[0] = keep[-1] = True
    starts = wf.bin_start + wf.bin_width * np.arange(len(wf.counts))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bin_start_ps", "count"])
        for s, c in zip(starts[keep].tolist(), wf.counts[keep].tolist()):
            w.writerow([repr(s), c])


def read_histogram_csv(path, bin_width: float = 1.0, pulses_fired: int | None = None) -> PixelWaveform:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["bin_start_ps", "count"] or len(rows) < 2:
        raise ValueError(f"{path}: not a histogram CSV")
    starts = np.array([float(r[0]) for r in rows[1:]])
    vals = np.array([int(r[1]) for r in rows[1:]], dtype=np.int64)
    idx = np.rint((starts - starts[0]) / bin_width).astype(int)
    counts = np.zeros(idx[-1] + 1, dtype=np.int64)
    counts[idx] = vals
    det = int(counts.sum())
    return PixelWaveform(bin_width, float(starts[0]), counts, det if pulses_fired is None else pulses_fired, det)


def iter_tag_records(path) -> Iterable[tuple[int, float, int]]:
    """Stream records of a binary tag file without loading numpy."""
    with open(path, "rb") as fh:
        head = fh.read(6)
        if head[:4] != TAG_MAGIC:
            raise ValueError(f"{path}: bad magic")
        while chunk := fh.read(_TAG_RECORD.size):
            if len(chunk) < _TAG_RECORD.size:
                raise ValueError(f"{path}: truncated record")
            yield _TAG_RECORD.unpack(chunk)
