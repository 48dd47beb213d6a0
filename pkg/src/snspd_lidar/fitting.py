"""Histogram peak fitting and jitter-budget algebra.

The least-squares machinery is a small bounded Levenberg-Marquardt solver
(Marquardt diagonal scaling, box constraints by projection). Both peak models
come with analytic Jacobians.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy import signal
from scipy.ndimage import gaussian_filter1d
from scipy.special import erfc, erfcx

from .errors import DomainError, InsufficientDataError
from .units import FWHM_PER_SIGMA

SQRT2 = math.sqrt(2.0)
SQRT_PI = math.sqrt(math.pi)
SQRT_2PI = math.sqrt(2.0 * math.pi)


# ---------------------------------------------------------------- solver --

@dataclass
class LMResult:
    params: np.ndarray
    cost: float
    converged: bool
    iterations: int
    jacobian: np.ndarray
    residuals: np.ndarray


def levenberg_marquardt(
    fun: Callable[[np.ndarray], np.ndarray],
    jac: Callable[[np.ndarray], np.ndarray],
    p0: Sequence[float],
    lower: Sequence[float] | None = None,
    upper: Sequence[float] | None = None,
    max_iter: int = 200,
    xtol: float = 1e-8,
) -> LMResult:
    """Minimise ``sum(fun(p)**2)``.

    Convergence means the scaled step ``|D^1/2 dp|`` fell below
    ``xtol * |D^1/2 p|`` with ``D = diag(J^T J)``, within ``max_iter``
    Jacobian evaluations.
    """
    p = np.asarray(p0, dtype=float).copy()
    lo = np.full(p.size, -np.inf) if lower is None else np.asarray(lower, dtype=float)
    hi = np.full(p.size, np.inf) if upper is None else np.asarray(upper, dtype=float)
    p = np.clip(p, lo, hi)
    r = fun(p)
    cost = float(r @ r)
    lam = 1e-3
    converged = False
    J = jac(p)
    it = 0
    while it < max_iter and not converged:
        it += 1
        A = J.T @ J
        g = J.T @ r
        d = np.maximum(np.diag(A).copy(), 1e-300)
        scale = np.sqrt(d)
        pnorm = float(np.linalg.norm(scale * p))
        while True:
            try:
                step = np.linalg.solve(A + lam * np.diag(d), -g)
            except np.linalg.LinAlgError:
                step = np.zeros_like(p)
            p_new = np.clip(p + step, lo, hi)
            dp = p_new - p
            small = float(np.linalg.norm(scale * dp)) <= xtol * max(pnorm, 1e-300)
            r_new = fun(p_new)
            cost_new = float(r_new @ r_new)
            if np.isfinite(cost_new) and cost_new <= cost:
                p, r, cost = p_new, r_new, cost_new
                lam = max(lam / 3.0, 1e-12)
                J = jac(p)
                converged = small
                break
            lam *= 4.0
            if small:
                # the minimum is resolved to xtol; further damping only shrinks the step
                converged = True
                break
            if lam > 1e16:
                break
        if lam > 1e16 and not converged:
            break
    return LMResult(p, cost, converged, it, J, r)


def _covariance(res: LMResult, n_points: int, known_variance: bool = False) -> np.ndarray:
    """Parameter covariance from the final Jacobian.

    With ``known_variance`` the residuals are already in units of their
    standard deviation and the plain Fisher information is used. Rescaling by
    the reduced chi-square is skipped there because the empty tail bins of a
    sparse histogram drag it well below one.
    """
    dof = max(n_points - res.params.size, 1)
    s2 = res.cost / dof
    if known_variance:
        s2 = 1.0
    try:
        return np.linalg.inv(res.jacobian.T @ res.jacobian) * s2
    except np.linalg.LinAlgError:
        return np.full((res.params.size, res.params.size), np.nan)


# ------------------------------------------------------------ gaussian fit --

@dataclass
class FitResult:
    """Gaussian-plus-baseline fit of one peak.

    ``amplitude`` is the peak height above baseline in counts per bin and
    ``fwhm`` the TOF jitter. The ``*_err`` fields are 1-sigma estimates from
    the residual-scaled covariance (Poisson fits use the Fisher information
    directly).
    """

    amplitude: float
    center: float
    fwhm: float
    baseline: float
    residual_rms: float
    converged: bool
    iterations: int
    center_err: float = math.nan
    fwhm_err: float = math.nan
    amplitude_err: float = math.nan
    counts: float = 0.0

    @property
    def sigma(self) -> float:
        return self.fwhm / FWHM_PER_SIGMA

    def model(self, t):
        t = np.asarray(t, dtype=float)
        return self.amplitude * np.exp(-0.5 * ((t - self.center) / self.sigma) ** 2) + self.baseline

    @classmethod
    def failed(cls, counts: float = 0.0) -> "FitResult":
        nan = math.nan
        return cls(nan, nan, nan, nan, nan, False, 0, counts=counts)


def gaussian(t, amplitude, center, sigma, baseline=0.0):
    return amplitude * np.exp(-0.5 * ((np.asarray(t) - center) / sigma) ** 2) + baseline


def _gauss_jac(t, p):
    a, mu, s, _ = p
    u = (t - mu) / s
    e = np.exp(-0.5 * u * u)
    return np.column_stack([e, a * e * u / s, a * e * u * u / s, np.ones_like(t)])


def _moment_guess(t, y, bin_width):
    n_edge = max(len(y) // 10, 1)
    b0 = max(min(float(y[:n_edge].mean()), float(y[-n_edge:].mean())), 0.0)
    w = np.clip(y - b0, 0.0, None)
    if w.sum() <= 0:
        w = y.astype(float)
    total = float(w.sum())
    mu0 = float((t * w).sum() / total)
    s0 = math.sqrt(max(float(((t - mu0) ** 2 * w).sum() / total), bin_width**2))
    a0 = total * bin_width / (s0 * SQRT_2PI)
    return np.array([a0, mu0, s0, b0])


def fit_gaussian_xy(
    t,
    counts,
    bin_width: float = 1.0,
    method: str = "lsq",
    max_iter: int = 200,
    xtol: float = 1e-8,
) -> FitResult:
    """Fit ``A exp(-(t-mu)^2 / 2 sigma^2) + b`` to binned counts at bin centres ``t``.

    ``method="poisson"`` iterates weighted least squares with weights
    ``1/model`` which converges to the Poisson maximum-likelihood estimate.
    """
    t = np.asarray(t, dtype=float)
    y = np.asarray(counts, dtype=float)
    if t.size < 5:
        raise InsufficientDataError(f"need at least 5 bins, got {t.size}")
    total = float(y.sum())
    if total < 10:
        raise InsufficientDataError(f"need at least 10 counts, got {total:g}")
    if method not in ("lsq", "poisson"):
        raise ValueError(f"unknown fit method {method!r}")

    span = float(t[-1] - t[0]) + bin_width
    p0 = _moment_guess(t, y, bin_width)
    lower = [0.0, t[0] - span, 0.05 * bin_width, -np.inf]
    upper = [np.inf, t[-1] + span, 10.0 * span, np.inf]

    w = np.ones_like(y)
    rounds = 1 if method == "lsq" else 5
    res = None
    for _ in range(rounds):
        sw = np.sqrt(w)

        def fun(p, sw=sw):
            return sw * (gaussian(t, *p) - y)

        def jac(p, sw=sw):
            return _gauss_jac(t, p) * sw[:, None]

        res = levenberg_marquardt(fun, jac, p0, lower, upper, max_iter=max_iter, xtol=xtol)
        p0 = res.params
        if method == "poisson":
            w = 1.0 / np.maximum(gaussian(t, *res.params), 1.0)

    a, mu, s, b = res.params
    fwhm = FWHM_PER_SIGMA * s
    resid = gaussian(t, *res.params) - y
    cov = _covariance(res, t.size, known_variance=method == "poisson")
    errs = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    converged = bool(
        res.converged
        and a > 0
        and not a <= 2.0 * errs[0]
        and fwhm >= bin_width
        and t[0] - 0.5 * bin_width <= mu <= t[-1] + 0.5 * bin_width
    )
    return FitResult(
        amplitude=float(a),
        center=float(mu),
        fwhm=float(fwhm),
        baseline=float(b),
        residual_rms=float(np.sqrt(np.mean(resid**2))),
        converged=converged,
        iterations=res.iterations,
        center_err=float(errs[1]),
        fwhm_err=float(errs[2] * FWHM_PER_SIGMA),
        amplitude_err=float(errs[0]),
        counts=total,
    )


def fit_gaussian(wf, window: tuple[float, float] | None = None, method: str = "lsq") -> FitResult:
    """Fit the bins of ``wf`` whose start lies in ``[window[0], window[1])``."""
    t, y = wf.bin_centers(), np.asarray(wf.counts, dtype=float)
    if window is not None:
        starts = wf.bin_start + wf.bin_width * np.arange(len(y))
        keep = (starts >= window[0] - 1e-9) & (starts < window[1] - 1e-9)
        t, y = t[keep], y[keep]
    return fit_gaussian_xy(t, y, wf.bin_width, method=method)


# ------------------------------------------------------------------ peaks --

@dataclass(frozen=True)
class PeakWindow:
    center: float
    amplitude: float
    prominence: float
    start: float
    stop: float


def find_peaks(wf, min_prominence: float = 3.0, min_separation: float = 50.0, smooth_ps: float = 0.0) -> list[PeakWindow]:
    """Candidate peaks, strongest first, each with a fit window of +-2 FWHM (at least +-5 bins)."""
    y = np.asarray(wf.counts, dtype=float)
    if y.size == 0 or not np.any(y > y.min()):
        return []
    if smooth_ps > 0:
        y = gaussian_filter1d(y, smooth_ps / wf.bin_width, mode="constant")
    padded = np.concatenate([[y.min()], y, [y.min()]])
    distance = max(int(round(min_separation / wf.bin_width)), 1)
    idx, props = signal.find_peaks(padded, prominence=min_prominence, distance=distance)
    if idx.size == 0:
        return []
    widths = signal.peak_widths(padded, idx, rel_height=0.5, prominence_data=(props["prominences"], props["left_bases"], props["right_bases"]))[0]
    idx = idx - 1
    out = []
    for i, prom, w in zip(idx, props["prominences"], widths):
        i = int(min(max(i, 0), y.size - 1))
        half = max(2.0 * w, 5.0)
        lo = max(int(math.floor(i - half)), 0)
        hi = min(int(math.ceil(i + half)) + 1, y.size)
        out.append(
            PeakWindow(
                center=wf.bin_start + (i + 0.5) * wf.bin_width,
                amplitude=float(y[i]),
                prominence=float(prom),
                start=wf.bin_start + lo * wf.bin_width,
                stop=wf.bin_start + hi * wf.bin_width,
            )
        )
    out.sort(key=lambda p: p.amplitude, reverse=True)
    return out


def select_target(peaks: Sequence[PeakWindow], gate: tuple[float, float] | None = None) -> PeakWindow | None:
    """Highest-amplitude peak whose centre falls inside the range gate."""
    for p in peaks:
        if gate is None or gate[0] <= p.center <= gate[1]:
            return p
    return None


def analyze_waveform(
    wf,
    gate: tuple[float, float] | None = None,
    min_prominence: float = 3.0,
    min_separation: float = 50.0,
    smooth_ps: float = 3.0,
    method: str = "lsq",
) -> FitResult:
    """Locate the target peak in a waveform and fit it; never raises on bad data."""
    counts = float(np.sum(wf.counts))
    target = select_target(find_peaks(wf, min_prominence, min_separation, smooth_ps), gate)
    if target is None:
        return FitResult.failed(counts)
    try:
        return fit_gaussian(wf, (target.start, target.stop), method=method)
    except InsufficientDataError:
        return FitResult.failed(counts)


# -------------------------------------------------------------------- EMG --

def emg_pdf(x, mu, sigma, tail_rate):
    """Exponentially modified Gaussian density, evaluated without overflow."""
    x = np.asarray(x, dtype=float)
    lam = tail_rate
    z = (mu + lam * sigma * sigma - x) / (SQRT2 * sigma)
    out = np.empty_like(z)
    pos = z >= 0
    # erfc(z) exp(E) == erfcx(z) exp(-(x-mu)^2 / 2 sigma^2) for z >= 0
    out[pos] = 0.5 * lam * np.exp(-0.5 * ((x[pos] - mu) / sigma) ** 2) * erfcx(z[pos])
    xn = x[~pos]
    out[~pos] = 0.5 * lam * np.exp(0.5 * lam * (2 * mu + lam * sigma * sigma - 2 * xn)) * erfc(z[~pos])
    return out


def _emg_model_and_jac(x, p):
    """Counts model ``A*f(x; mu, sigma, tau)`` and its Jacobian; ``tau = 1/lambda``."""
    a, mu, s, tau = p
    lam = 1.0 / tau
    f = emg_pdf(x, mu, s, lam)
    g = (lam / SQRT_PI) * np.exp(-0.5 * ((x - mu) / s) ** 2)
    df_dmu = lam * f - g / (SQRT2 * s)
    dz_ds = -(mu - x) / (SQRT2 * s * s) + lam / SQRT2
    df_ds = f * lam * lam * s - g * dz_ds
    df_dlam = f / lam + f * (mu + lam * s * s - x) - g * s / SQRT2
    df_dtau = -lam * lam * df_dlam
    jac = np.column_stack([f, a * df_dmu, a * df_ds, a * df_dtau])
    return a * f, jac


@dataclass
class EmgFit:
    mu: float
    sigma: float
    tail_rate: float
    mean: float
    converged: bool
    iterations: int = 0
    amplitude: float = math.nan
    sample_mean: float = math.nan
    sample_std: float = math.nan
    sem: float = math.nan  # standard error of the sample mean
    n_samples: int = 0

    @property
    def tau(self) -> float:
        return 1.0 / self.tail_rate

    @property
    def std(self) -> float:
        return math.sqrt(self.sigma**2 + self.tau**2)

    def pdf(self, x):
        return emg_pdf(x, self.mu, self.sigma, self.tail_rate)


def fit_emg(samples, bin: float = 0.5, max_iter: int = 200, xtol: float = 1e-8) -> EmgFit:
    """Histogram ``samples`` at ``bin`` width and fit an EMG density to the counts.

    The fit is Poisson maximum likelihood, reached by reweighting least squares.

    Bin edges sit on integer multiples of ``bin`` so translating the samples
    by a whole number of bins translates the fit exactly.
    """
    x = np.asarray(samples, dtype=float)
    x = x[np.isfinite(x)]
    if x.size < 100:
        raise InsufficientDataError(f"need at least 100 samples, got {x.size}")
    lo = math.floor(x.min() / bin)
    hi = math.floor(x.max() / bin) + 1
    idx = np.floor(x / bin).astype(np.int64) - lo
    counts = np.bincount(idx, minlength=hi - lo).astype(float)
    centers = (np.arange(hi - lo) + lo + 0.5) * bin

    m, sd = float(x.mean()), float(x.std())
    skew = float(np.mean(((x - m) / sd) ** 3)) if sd > 0 else 0.0
    skew = min(max(skew, 0.05), 1.9)
    tau0 = sd * (skew / 2.0) ** (1.0 / 3.0)
    s0 = math.sqrt(max(sd * sd - tau0 * tau0, (0.1 * sd) ** 2))
    p0 = [x.size * bin, m - tau0, s0, tau0]
    tau_min = 1e-4 * max(sd, bin)
    lower = [0.0, -np.inf, 0.01 * bin, tau_min]
    upper = [np.inf, np.inf, np.inf, 100.0 * max(sd, bin)]

    # Poisson weights: unweighted residuals let the peak bins swamp the tail
    # that separates sigma from tau near the Gaussian limit
    w = np.ones_like(counts)
    res = None
    for _ in range(5):
        sw = np.sqrt(w)

        def fun(p, sw=sw):
            return sw * (_emg_model_and_jac(centers, p)[0] - counts)

        def jac(p, sw=sw):
            return _emg_model_and_jac(centers, p)[1] * sw[:, None]

        res = levenberg_marquardt(fun, jac, p0, lower, upper, max_iter=max_iter, xtol=xtol)
        p0 = res.params
        w = 1.0 / np.maximum(_emg_model_and_jac(centers, p0)[0], 1.0)
    a, mu, s, tau = res.params
    return EmgFit(
        mu=float(mu),
        sigma=float(s),
        tail_rate=float(1.0 / tau),
        mean=float(mu + tau),
        converged=bool(res.converged and s > 0 and tau > 0),
        iterations=res.iterations,
        amplitude=float(a),
        sample_mean=m,
        sample_std=sd,
        sem=sd / math.sqrt(x.size),
        n_samples=int(x.size),
    )


# ---------------------------------------------------------- jitter budget --

BUDGET_TERMS = ("snspd", "laser", "tdc", "sync", "reflection")


@dataclass(frozen=True)
class JitterBudget:
    snspd: float = 0.0
    laser: float = 0.0
    tdc: float = 0.0
    sync: float = 0.0
    reflection: float = 0.0
    total: float = field(default=0.0)

    def components(self) -> dict[str, float]:
        return {k: getattr(self, k) for k in BUDGET_TERMS}


def _values(known) -> list[float]:
    if isinstance(known, Mapping):
        return [float(v) for v in known.values()]
    return [float(v) for v in known]


def quadrature_sum(values) -> float:
    return math.sqrt(sum(v * v for v in values))


def compose_budget(components: Mapping[str, float] | None = None, **kw: float) -> JitterBudget:
    """Root-sum-square total of the named FWHM contributions (ps)."""
    terms = dict(components or {}, **kw)
    unknown = set(terms) - set(BUDGET_TERMS)
    if unknown:
        raise KeyError(f"unknown jitter component(s): {sorted(unknown)}")
    for name, v in terms.items():
        if not v >= 0:
            raise DomainError(f"jitter component {name} must be >= 0, got {v}")
    return JitterBudget(**terms, total=quadrature_sum(terms.values()))


def backout_component(total: float, known=()) -> float:
    """The one unknown contribution: ``sqrt(total^2 - sum(known^2))``."""
    vals = _values(known)
    deficit = total * total - sum(v * v for v in vals)
    if -8 * np.finfo(float).eps * total * total <= deficit < 0:
        deficit = 0.0  # rounding from composing the total, not a real shortfall
    if deficit < 0:
        raise DomainError(
            f"known components ({quadrature_sum(vals):.4g} ps in quadrature) exceed the total "
            f"{total:.4g} ps; deficit {deficit:.4g} ps^2"
        )
    return math.sqrt(deficit)
