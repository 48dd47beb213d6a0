"""Phenomenological SNSPD model.

Bias dependence of efficiency and jitter, the kinetic-inductance scaling of the
electronic jitter, and a multiphoton law in which an event with ``n`` absorbed
photons fires ``a*ln(n)`` earlier with a FWHM of
``max(floor, fwhm_1 / n**p)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .errors import DomainError, InsufficientDataError
from .fitting import FitResult, fit_gaussian_xy
from .units import sigma_from_fwhm


@dataclass(frozen=True)
class NanowireGeometry:
    thickness: float  # nm
    width: float  # nm
    length: float  # um
    series_inductor_length: float = 0.0  # um
    series_inductor_width: float | None = None  # nm, defaults to the nanowire width
    material_label: str = ""

    def __post_init__(self):
        if not (self.thickness > 0 and self.width > 0 and self.length > 0):
            raise DomainError("nanowire thickness, width and length must be positive")
        if self.series_inductor_length < 0:
            raise DomainError("series inductor length must be >= 0")
        if self.series_inductor_width is not None and self.series_inductor_width <= 0:
            raise DomainError("series inductor width must be positive")

    @property
    def area(self) -> float:
        return self.thickness * self.width


@dataclass(frozen=True)
class MultiphotonLaw:
    latency_shift_per_e_fold: float = 0.0  # ps earlier per e-fold in n
    jitter_floor: float = 0.0  # ps FWHM
    single_photon_jitter: float | None = None  # ps FWHM; None follows detector_jitter(bias)
    fano_exponent: float = 0.5

    def __post_init__(self):
        if self.latency_shift_per_e_fold < 0:
            raise DomainError("latency_shift_per_e_fold must be >= 0")
        if self.jitter_floor < 0 or self.fano_exponent <= 0:
            raise DomainError("jitter_floor must be >= 0 and fano_exponent > 0")
        if self.single_photon_jitter is not None and self.jitter_floor > self.single_photon_jitter:
            raise DomainError("jitter_floor must not exceed single_photon_jitter")

    def mean_shift(self, n):
        """Latency of an n-photon event relative to the single-photon mean (ps, <= 0)."""
        return -self.latency_shift_per_e_fold * np.log(np.asarray(n, dtype=float))

    def fwhm(self, n, single_fwhm: float):
        return np.maximum(self.jitter_floor, single_fwhm / np.asarray(n, dtype=float) ** self.fano_exponent)


@dataclass(frozen=True)
class DetectorModel:
    name: str
    geometry: NanowireGeometry
    i_switch: float  # uA
    ocde_max: float
    ocde_saturation_shape: float  # k in (1 - exp(-k x^m)) / (1 - exp(-k))
    ocde_onset_exponent: float  # m
    jitter_at_95pct_bias: float  # ps FWHM
    jitter_bias_exponent: float  # jitter ~ (I_b / 0.95 I_c)^-exponent
    noise_voltage_scale: float = 1.0
    kinetic_inductance_scale: float = 1.0
    multiphoton: MultiphotonLaw = field(default_factory=MultiphotonLaw)

    def __post_init__(self):
        if not 0.0 <= self.ocde_max <= 1.0:
            raise DomainError(f"ocde_max must lie in [0, 1], got {self.ocde_max}")
        if not self.i_switch > 0:
            raise DomainError("i_switch must be positive")
        if not self.jitter_at_95pct_bias > 0:
            raise DomainError("jitter_at_95pct_bias must be positive")
        if not (self.ocde_saturation_shape > 0 and self.ocde_onset_exponent > 0):
            raise DomainError("OCDE curve shape parameters must be positive")
        if self.jitter_bias_exponent < 0:
            raise DomainError("jitter_bias_exponent must be >= 0")
        if self.noise_voltage_scale < 0 or self.kinetic_inductance_scale <= 0:
            raise DomainError("noise_voltage_scale must be >= 0 and kinetic_inductance_scale > 0")

    def with_overrides(self, **kw) -> "DetectorModel":
        law_keys = {f for f in MultiphotonLaw.__dataclass_fields__}
        geo_keys = {f for f in NanowireGeometry.__dataclass_fields__}
        law = {k: kw.pop(k) for k in list(kw) if k in law_keys}
        geo = {k: kw.pop(k) for k in list(kw) if k in geo_keys}
        out = replace(self, **kw)
        if law:
            out = replace(out, multiphoton=replace(out.multiphoton, **law))
        if geo:
            out = replace(out, geometry=replace(out.geometry, **geo))
        return out


# ------------------------------------------------------------ curves --

def saturation_curve(x, k: float, m: float):
    """``(1 - exp(-k x^m)) / (1 - exp(-k))``: 0 at x=0, 1 at x=1, nondecreasing."""
    x = np.asarray(x, dtype=float)
    return -np.expm1(-k * x**m) / -math.expm1(-k)


def ocde_max_for(target: float, k: float, m: float, at: float = 0.95) -> float:
    """Plateau efficiency that puts the curve through ``target`` at ``at * I_c``."""
    return target / float(saturation_curve(at, k, m))


PRESETS: dict[str, DetectorModel] = {}


def kinetic_inductance(geometry: NanowireGeometry, detecting_only: bool = False) -> float:
    """Relative kinetic inductance, sum of length / cross-section over the routed wire."""
    lk = geometry.length / geometry.area
    if not detecting_only and geometry.series_inductor_length > 0:
        w = geometry.series_inductor_width or geometry.width
        lk += geometry.series_inductor_length / (geometry.thickness * w)
    return lk


def electronic_jitter(model: DetectorModel, detecting_only: bool = False) -> float:
    """Relative electronic jitter, noise voltage times sqrt(L_K); only ratios are meaningful."""
    return model.noise_voltage_scale * math.sqrt(model.kinetic_inductance_scale * kinetic_inductance(model.geometry, detecting_only))


def _check_bias(model: DetectorModel, i_bias, strict_zero: bool):
    if isinstance(i_bias, (int, float)):
        v = float(i_bias)
        if (v > 0 or (v == 0 and not strict_zero)) and v <= model.i_switch * (1 + 1e-12):
            return v
    i = np.asarray(i_bias, dtype=float)
    bad = (i <= 0) if strict_zero else (i < 0)
    if np.any(bad) or np.any(i > model.i_switch * (1 + 1e-12)) or not np.all(np.isfinite(i)):
        bound = "(0, I_c]" if strict_zero else "[0, I_c]"
        raise DomainError(f"bias current {i_bias} uA outside {bound} with I_c = {model.i_switch} uA")
    return i


def ocde(model: DetectorModel, i_bias):
    x = _check_bias(model, i_bias, strict_zero=False) / model.i_switch
    out = model.ocde_max * saturation_curve(x, model.ocde_saturation_shape, model.ocde_onset_exponent)
    return float(out) if np.ndim(out) == 0 else out


def detector_jitter(model: DetectorModel, i_bias):
    """Single-photon system jitter (FWHM, ps); a power law in bias anchored at 95 % of I_c."""
    x = _check_bias(model, i_bias, strict_zero=True) / model.i_switch
    out = model.jitter_at_95pct_bias * (x / 0.95) ** (-model.jitter_bias_exponent)
    return float(out) if np.ndim(out) == 0 else out


def single_photon_fwhm(model: DetectorModel, i_bias: float) -> float:
    law = model.multiphoton
    return law.single_photon_jitter if law.single_photon_jitter is not None else detector_jitter(model, i_bias)


def bias_for_jitter(model: DetectorModel, fwhm: float) -> float:
    """Bias current (uA) at which :func:`detector_jitter` equals ``fwhm``."""
    if model.jitter_bias_exponent == 0:
        raise DomainError("jitter does not depend on bias for this model")
    x = 0.95 * (fwhm / model.jitter_at_95pct_bias) ** (-1.0 / model.jitter_bias_exponent)
    if not 0 < x <= 1:
        raise DomainError(f"jitter {fwhm} ps is not reachable within (0, I_c]")
    return x * model.i_switch


# ----------------------------------------------------------- presets --

# SNSPD1: thick/short NbTiN wire with a 300 nm x 800 um series inductor.
# 21 ps at 0.95 I_c and 23.7 ps at the 20 uA acquisition bias fix the exponent.
_SNSPD1_K, _SNSPD1_M = 4.0, 6.0
SNSPD1 = DetectorModel(
    name="snspd1",
    geometry=NanowireGeometry(12.0, 100.0, 10.0, 800.0, 300.0, "NbTiN"),
    i_switch=23.0,
    ocde_max=ocde_max_for(0.804, _SNSPD1_K, _SNSPD1_M),
    ocde_saturation_shape=_SNSPD1_K,
    ocde_onset_exponent=_SNSPD1_M,
    jitter_at_95pct_bias=21.0,
    jitter_bias_exponent=math.log(23.7 / 21.0) / math.log(0.95 * 23.0 / 20.0),
    multiphoton=MultiphotonLaw(latency_shift_per_e_fold=3.0, jitter_floor=8.0, fano_exponent=0.5),
)

# SNSPD2: thin/long NbN hairpin, not saturated at the latching bias.
# Latency shift and Fano exponent are chosen; the floor comes from
# calibrate_jitter_floor so that the n-bar sweep at SNSPD2_NBAR_BIAS runs from
# 31 ps to 11 ps at n-bar = 545 with the default 1.5 ps TDC, 1.0 ps sync and
# 0.1 ps laser contributions.
_SNSPD2_K, _SNSPD2_M = 0.5, 8.0
SNSPD2 = DetectorModel(
    name="snspd2",
    geometry=NanowireGeometry(5.0, 120.0, 50.0, 0.0, None, "NbN"),
    i_switch=10.6,
    ocde_max=ocde_max_for(0.032, _SNSPD2_K, _SNSPD2_M),
    ocde_saturation_shape=_SNSPD2_K,
    ocde_onset_exponent=_SNSPD2_M,
    jitter_at_95pct_bias=26.0,
    jitter_bias_exponent=1.5,
    multiphoton=MultiphotonLaw(latency_shift_per_e_fold=3.0, jitter_floor=9.9471, fano_exponent=0.7),
)

# Bias at which SNSPD2's single-photon jitter plus the default chain totals 31 ps.
SNSPD2_NBAR_BIAS = 8.966

PRESETS.update(snspd1=SNSPD1, snspd2=SNSPD2)

def preset(name: str) -> DetectorModel:
    try:
        return PRESETS[name.lower()]
    except KeyError:
        raise KeyError(f"unknown detector preset {name!r}; choose from {sorted(PRESETS)}") from None


# ---------------------------------------------------------- sampling --

@dataclass(frozen=True)
class DetectionSample:
    fired: bool
    n_absorbed: int
    latency_offset: float  # ps relative to the single-photon mean; nan when not fired


def sample_detection(model: DetectorModel, i_bias: float, n_arriving_mean: float, rng: np.random.Generator) -> DetectionSample:
    """One pulse: Poisson arrivals thinned by the OCDE, then the n-photon latency law."""
    if n_arriving_mean < 0:
        raise DomainError("mean photon number must be >= 0")
    eta = ocde(model, i_bias)
    arriving = rng.poisson(n_arriving_mean)
    n = int(rng.binomial(arriving, eta)) if arriving else 0
    if n == 0:
        return DetectionSample(False, 0, math.nan)
    law = model.multiphoton
    sigma = sigma_from_fwhm(float(law.fwhm(n, single_photon_fwhm(model, i_bias))))
    return DetectionSample(True, n, float(rng.normal(float(law.mean_shift(n)), sigma)))


def zero_truncated_poisson(mu: float, size: int, rng: np.random.Generator) -> np.ndarray:
    """Poisson(mu) draws conditioned on being >= 1."""
    if size == 0:
        return np.zeros(0, dtype=np.int64)
    if mu <= 0:
        raise DomainError("zero-truncated Poisson needs mu > 0")
    if mu < 1.0:
        kmax = 1
        log_p = [math.log(mu) - mu]  # log P(N=1) up to the common normaliser
        while log_p[-1] > math.log(mu) - mu - 40:
            kmax += 1
            log_p.append(log_p[-1] + math.log(mu) - math.log(kmax))
        p = np.exp(np.array(log_p) - log_p[0])
        cdf = np.cumsum(p)
        cdf /= cdf[-1]
        return np.searchsorted(cdf, rng.random(size), side="right").astype(np.int64) + 1
    out = np.empty(size, dtype=np.int64)
    filled = 0
    while filled < size:
        draw = rng.poisson(mu, size=int((size - filled) * 1.2 / -math.expm1(-mu)) + 16)
        draw = draw[draw > 0][: size - filled]
        out[filled : filled + draw.size] = draw
        filled += draw.size
    return out


def sample_fired(model: DetectorModel, i_bias: float, n_arriving_mean: float, count: int, rng: np.random.Generator):
    """Absorbed-photon numbers and latency offsets for ``count`` pulses known to have fired."""
    eta = ocde(model, i_bias)
    n = zero_truncated_poisson(eta * n_arriving_mean, count, rng)
    law = model.multiphoton
    sigma = sigma_from_fwhm(law.fwhm(n, single_photon_fwhm(model, i_bias)))
    offsets = law.mean_shift(n) + sigma * rng.standard_normal(count)
    return n, offsets


def sample_pulses(model: DetectorModel, i_bias: float, n_arriving_mean: float, n_pulses: int, rng: np.random.Generator):
    """Vectorised equivalent of ``n_pulses`` calls to :func:`sample_detection`.

    Returns ``(pulse_index, n_absorbed, latency_offset)`` for the pulses that
    fired, pulse indices sorted ascending.
    """
    if n_arriving_mean < 0:
        raise DomainError("mean photon number must be >= 0")
    mu = ocde(model, i_bias) * n_arriving_mean
    if mu <= 0 or n_pulses <= 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64), np.zeros(0)
    k = int(rng.binomial(n_pulses, -math.expm1(-mu)))
    idx = np.sort(rng.choice(n_pulses, size=k, replace=False)) if k < n_pulses else np.arange(n_pulses)
    n, offsets = sample_fired(model, i_bias, n_arriving_mean, k, rng)
    return idx.astype(np.int64), n, offsets


# ------------------------------------------------------ n-bar sweep --

@dataclass
class NbarPoint:
    nbar: float
    pulses: int
    detections: int
    n1_count: int
    multi_count: int
    fit_all: FitResult
    fit_n1: FitResult
    fit_multi: FitResult
    counts: np.ndarray  # histogram of all detections on the sweep's latency axis


def _fit_branch(latencies, edges, min_counts, method="poisson") -> tuple[FitResult, np.ndarray]:
    counts = np.histogram(latencies, bins=edges)[0]
    if latencies.size < min_counts:
        return FitResult.failed(float(latencies.size)), counts
    centers = 0.5 * (edges[:-1] + edges[1:])
    try:
        return fit_gaussian_xy(centers, counts, edges[1] - edges[0], method=method), counts
    except InsufficientDataError:
        return FitResult.failed(float(latencies.size)), counts


def sweep_window(model: DetectorModel, i_bias: float, nbar_max: float, extra_jitter_fwhm: float = 0.0) -> tuple[float, float]:
    width = math.hypot(single_photon_fwhm(model, i_bias), extra_jitter_fwhm)
    mu_max = max(ocde(model, i_bias) * nbar_max, 1.0)
    shift = model.multiphoton.latency_shift_per_e_fold * math.log(mu_max + 6.0 * math.sqrt(mu_max) + 1.0)
    return (math.floor(-shift - 3.0 * width), math.ceil(3.0 * width))


def jitter_vs_nbar(
    model: DetectorModel,
    i_bias: float,
    nbar_grid: Sequence[float],
    pulses_per_point: int,
    rng: np.random.Generator,
    extra_jitter_fwhm: float = 0.0,
    min_detections: int = 20_000,
    min_branch_counts: int = 2_000,
    bin_width: float = 1.0,
    window: tuple[float, float] | None = None,
) -> list[NbarPoint]:
    """TOF jitter against mean photon number, fitted separately for n=1, n>1 and all events.

    Each point simulates ``pulses_per_point`` pulses, raised where needed so
    the expected number of detections reaches ``min_detections``; only fired
    pulses are materialised. ``extra_jitter_fwhm`` is an independent Gaussian
    standing in for the rest of the timing chain. Branches with fewer than
    ``min_branch_counts`` events report a failed fit rather than aborting.
    """
    grid = [float(v) for v in nbar_grid]
    if not grid:
        raise DomainError("nbar_grid must not be empty")
    if pulses_per_point < 10_000:
        raise DomainError("pulses_per_point must be >= 1e4")
    if window is None:
        window = sweep_window(model, i_bias, max(grid), extra_jitter_fwhm)
    edges = np.arange(window[0], window[1] + bin_width / 2, bin_width)
    eta = ocde(model, i_bias)
    extra_sigma = sigma_from_fwhm(extra_jitter_fwhm)
    out = []
    for nbar in grid:
        p_fire = -math.expm1(-eta * nbar)
        pulses = pulses_per_point
        if p_fire > 0 and pulses * p_fire < min_detections:
            pulses = int(math.ceil(min_detections / p_fire))
        k = int(rng.binomial(pulses, p_fire)) if p_fire > 0 else 0
        n, offsets = sample_fired(model, i_bias, nbar, k, rng)
        lat = offsets + extra_sigma * rng.standard_normal(k)
        single = n == 1
        fit_all, counts = _fit_branch(lat, edges, min_branch_counts)
        fit_n1, _ = _fit_branch(lat[single], edges, min_branch_counts)
        fit_multi, _ = _fit_branch(lat[~single], edges, min_branch_counts)
        out.append(NbarPoint(nbar, pulses, k, int(single.sum()), int((~single).sum()), fit_all, fit_n1, fit_multi, counts))
    return out


# ------------------------------------------------------ calibration --

def mixture_density(model: DetectorModel, i_bias: float, nbar: float, t, extra_jitter_fwhm: float = 0.0, branch: str = "all"):
    """Exact latency density of fired events (optionally one branch), by summing the Poisson mixture."""
    mu = ocde(model, i_bias) * nbar
    if mu <= 0:
        raise DomainError("no detections at zero mean photon number")
    law = model.multiphoton
    f1 = single_photon_fwhm(model, i_bias)
    kmax = int(mu + 12 * math.sqrt(mu) + 20)
    n = np.arange(1, kmax + 1)
    log_w = n * math.log(mu) - mu - np.array([math.lgamma(k + 1) for k in n])
    w = np.exp(log_w)
    if branch == "n1":
        w = np.where(n == 1, w, 0.0)
    elif branch == "multi":
        w = np.where(n > 1, w, 0.0)
    w = w / w.sum()
    sig = np.hypot(sigma_from_fwhm(law.fwhm(n, f1)), sigma_from_fwhm(extra_jitter_fwhm))
    t = np.asarray(t, dtype=float)[:, None]
    dens = w / (sig * math.sqrt(2 * math.pi)) * np.exp(-0.5 * ((t - law.mean_shift(n)) / sig) ** 2)
    return dens.sum(axis=1)


def expected_fwhm(model: DetectorModel, i_bias: float, nbar: float, extra_jitter_fwhm: float = 0.0, branch: str = "all", method: str = "poisson") -> float:
    """FWHM a Gaussian fit would report for infinitely many 1 ps-binned events."""
    window = sweep_window(model, i_bias, nbar, extra_jitter_fwhm)
    edges = np.arange(window[0], window[1] + 0.5, 1.0)
    # bin integrals of the density via a fine grid
    fine = np.linspace(edges[0], edges[-1], (len(edges) - 1) * 20 + 1)
    dens = mixture_density(model, i_bias, nbar, fine, extra_jitter_fwhm, branch)
    cum = np.concatenate([[0.0], np.cumsum(0.5 * (dens[1:] + dens[:-1]) * np.diff(fine))])
    mass = np.diff(cum[::20]) * 1e6
    centers = 0.5 * (edges[:-1] + edges[1:])
    return fit_gaussian_xy(centers, mass, 1.0, method=method).fwhm


def calibrate_jitter_floor(model: DetectorModel, i_bias: float, nbar: float, target_fwhm: float, extra_jitter_fwhm: float = 0.0) -> float:
    """Multiphoton jitter floor (FWHM) for which the all-event fit at ``nbar`` gives ``target_fwhm``."""
    from scipy.optimize import brentq

    def gap(floor):
        m = model.with_overrides(jitter_floor=floor)
        return expected_fwhm(m, i_bias, nbar, extra_jitter_fwhm) - target_fwhm

    hi = single_photon_fwhm(model, i_bias)
    return brentq(gap, 0.0, hi, xtol=1e-6)
