"""Full-waveform image processing: median filtering, normalisation and Fourier-space fusion.

The FFT is implemented here (iterative radix-2 with a Bluestein fallback for
other lengths) so spectral weights can be applied without further dependencies.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DomainError


@dataclass
class ScalarImage:
    rows: int
    cols: int
    data: np.ndarray  # (rows, cols); NaN marks a missing pixel
    channel_label: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=float)
        if self.data.size != self.rows * self.cols:
            raise DomainError(f"{self.rows}x{self.cols} image needs {self.rows * self.cols} values, got {self.data.size}")
        self.data = self.data.reshape(self.rows, self.cols)
        if np.any(np.isinf(self.data)):
            raise DomainError("image values must be finite or NaN (missing)")

    @classmethod
    def from_array(cls, a, label: str = "", **meta) -> "ScalarImage":
        a = np.asarray(a, dtype=float)
        return cls(a.shape[0], a.shape[1], a, label, dict(meta))

    @property
    def missing(self) -> np.ndarray:
        return np.isnan(self.data)

    def like(self, data, label: str | None = None, **meta) -> "ScalarImage":
        return ScalarImage(self.rows, self.cols, data, self.channel_label if label is None else label, {**self.meta, **meta})


# ------------------------------------------------------------------ FFT --

def _is_pow2(n: int) -> bool:
    return n > 0 and n & (n - 1) == 0


def _bit_reverse(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.int64)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    return rev


def _fft_pow2(x: np.ndarray, inverse: bool) -> np.ndarray:
    n = x.shape[-1]
    a = x[..., _bit_reverse(n)].astype(complex)
    sign = 1.0 if inverse else -1.0
    size = 2
    while size <= n:
        half = size // 2
        w = np.exp(sign * 2j * math.pi * np.arange(half) / size)
        a = a.reshape(a.shape[:-1] + (n // size, size))
        even = a[..., :half]
        odd = a[..., half:] * w
        a = np.concatenate([even + odd, even - odd], axis=-1).reshape(a.shape[:-2] + (n,))
        size *= 2
    return a


def _fft_bluestein(x: np.ndarray, inverse: bool) -> np.ndarray:
    n = x.shape[-1]
    m = 1 << (2 * n - 1).bit_length()
    k = np.arange(n)
    sign = 1.0 if inverse else -1.0
    # k^2 mod 2n keeps the chirp phase small for large n
    chirp = np.exp(sign * 1j * math.pi * ((k * k) % (2 * n)) / n)
    a = np.zeros(x.shape[:-1] + (m,), dtype=complex)
    a[..., :n] = x * chirp
    b = np.zeros(m, dtype=complex)
    b[:n] = np.conj(chirp)
    b[m - n + 1 :] = np.conj(chirp[1:][::-1])
    conv = _fft_pow2(_fft_pow2(a, False) * _fft_pow2(b, False), True) / m
    return conv[..., :n] * chirp


def fft(x, inverse: bool = False) -> np.ndarray:
    """DFT along the last axis; the inverse includes the ``1/n`` factor."""
    x = np.asarray(x, dtype=complex)
    n = x.shape[-1]
    if n == 0:
        raise DomainError("cannot transform an empty axis")
    out = _fft_pow2(x, inverse) if _is_pow2(n) else _fft_bluestein(x, inverse)
    return out / n if inverse else out


def ifft(x) -> np.ndarray:
    return fft(x, inverse=True)


def fft2(x, inverse: bool = False) -> np.ndarray:
    a = fft(np.asarray(x, dtype=complex), inverse)
    return np.swapaxes(fft(np.swapaxes(a, -1, -2), inverse), -1, -2)


def ifft2(x) -> np.ndarray:
    return fft2(x, inverse=True)


def dft_naive(x) -> np.ndarray:
    """Direct O(n^2) DFT along the last axis, for checking."""
    x = np.asarray(x, dtype=complex)
    n = x.shape[-1]
    k = np.arange(n)
    return x @ np.exp(-2j * math.pi * np.outer(k, k) / n)


def frequencies(n: int) -> np.ndarray:
    """Signed frequencies in cycles per sample, in transform order."""
    k = np.arange(n)
    return np.where(k < (n + 1) // 2, k, k - n) / n


# ---------------------------------------------------------------- images --

def median_filter(img: ScalarImage, radius: int = 1) -> ScalarImage:
    """``(2r+1)^2`` median with edge-replicated borders; missing pixels are left out of every median."""
    if radius < 1:
        raise DomainError("radius must be >= 1")
    padded = np.pad(img.data, radius, mode="edge")
    win = sliding_window_view(padded, (2 * radius + 1, 2 * radius + 1)).reshape(img.rows, img.cols, -1)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)  # all-missing neighbourhoods stay NaN
        out = np.nanmedian(win, axis=-1)
    return img.like(out)


def normalize(img: ScalarImage, invert: bool = False) -> ScalarImage:
    """Affine map of the finite values onto [0, 1] (reversed when ``invert``)."""
    vals = img.data[np.isfinite(img.data)]
    if vals.size == 0 or vals.min() == vals.max():
        raise DomainError(f"cannot normalise image {img.channel_label!r}: fewer than two distinct values")
    lo, hi = vals.min(), vals.max()
    out = (img.data - lo) / (hi - lo)
    if invert:
        out = 1.0 - out
    return img.like(out)


def impute_missing(img: ScalarImage) -> ScalarImage:
    """Fill NaNs with the 3x3 median of their valid neighbours, else the channel mean."""
    if not np.any(img.missing):
        return img
    local = median_filter(img, 1).data
    out = np.where(img.missing, local, img.data)
    finite = img.data[np.isfinite(img.data)]
    fallback = float(finite.mean()) if finite.size else 0.0
    n_local = int(np.sum(img.missing & np.isfinite(local)))
    n_mean = int(np.sum(np.isnan(out)))
    out = np.where(np.isnan(out), fallback, out)
    return img.like(out, imputed_local_median=n_local, imputed_channel_mean=n_mean)


Weight = Union[None, float, np.ndarray, Callable[[np.ndarray, np.ndarray], np.ndarray]]


def _weight_array(w: Weight, shape) -> np.ndarray | float:
    if w is None:
        return 1.0
    if callable(w):
        fy, fx = np.meshgrid(frequencies(shape[0]), frequencies(shape[1]), indexing="ij")
        return np.asarray(w(fy, fx), dtype=float)
    w = np.asarray(w, dtype=float)
    if w.ndim and w.shape != tuple(shape):
        raise DomainError(f"spectral weight shape {w.shape} does not match image {shape}")
    return w


def gaussian_lowpass(cutoff: float) -> Callable[[np.ndarray, np.ndarray], np.ndarray]:
    """Spectral weight ``exp(-f^2 / 2 cutoff^2)`` with ``f`` in cycles per pixel."""
    if cutoff <= 0:
        raise DomainError("cutoff must be positive")
    return lambda fy, fx: np.exp(-(fx * fx + fy * fy) / (2.0 * cutoff * cutoff))


def fourier_fuse(a: ScalarImage, b: ScalarImage, weight_a: Weight = None, weight_b: Weight = None, label: str = "fused") -> ScalarImage:
    """Sum the spectra of ``a`` and ``b`` (optionally weighted) and transform back."""
    if (a.rows, a.cols) != (b.rows, b.cols):
        raise DomainError(f"image sizes differ: {a.rows}x{a.cols} vs {b.rows}x{b.cols}")
    a, b = impute_missing(a), impute_missing(b)
    shape = (a.rows, a.cols)
    spectrum = fft2(a.data) * _weight_array(weight_a, shape) + fft2(b.data) * _weight_array(weight_b, shape)
    meta = {f"a_{k}": v for k, v in a.meta.items() if k.startswith("imputed")}
    meta.update({f"b_{k}": v for k, v in b.meta.items() if k.startswith("imputed")})
    return ScalarImage(a.rows, a.cols, ifft2(spectrum).real, label, meta)


@dataclass(frozen=True)
class FusionConfig:
    median_radius: int = 1
    invert_jitter: bool = True
    lowpass_jitter: float | None = None  # cutoff in cycles/pixel, None for unit weights


def fuse_pipeline(peak: ScalarImage, jitter: ScalarImage, cfg: FusionConfig = FusionConfig()) -> ScalarImage:
    """Median filter, normalise (jitter inverted), fuse in Fourier space, renormalise."""
    if (peak.rows, peak.cols) != (jitter.rows, jitter.cols):
        raise DomainError("peak-height and jitter images differ in size")
    p = normalize(median_filter(peak, cfg.median_radius))
    j = normalize(median_filter(jitter, cfg.median_radius), invert=cfg.invert_jitter)
    wj = gaussian_lowpass(cfg.lowpass_jitter) if cfg.lowpass_jitter else None
    return normalize(fourier_fuse(p, j, None, wj))


def gradient_magnitude(img: ScalarImage) -> np.ndarray:
    gy, gx = np.gradient(impute_missing(img).data)
    return np.hypot(gx, gy)


def edge_contrast(img: ScalarImage, edge_mask) -> float:
    """Mean gradient magnitude on ``edge_mask`` over the mean elsewhere."""
    g = gradient_magnitude(img)
    m = np.asarray(edge_mask, dtype=bool)
    if not m.any() or m.all():
        raise DomainError("edge mask must select some but not all pixels")
    off = float(g[~m].mean())
    return float(g[m].mean()) / off if off > 0 else math.inf


# ------------------------------------------------------------------- I/O --

def write_image_csv(img: ScalarImage, path) -> None:
    with open(path, "w", newline="\n") as fh:
        fh.write(f"# channel={img.channel_label} rows={img.rows} cols={img.cols}\n")
        for row in img.data:
            fh.write(",".join("nan" if math.isnan(v) else repr(float(v)) for v in row) + "\n")


def read_image_csv(path) -> ScalarImage:
    with open(path) as fh:
        header = fh.readline().strip()
        if not header.startswith("#"):
            raise ValueError(f"{path}: missing image header")
        fields = dict(tok.split("=", 1) for tok in header[1:].split() if "=" in tok)
        try:
            rows, cols = int(fields["rows"]), int(fields["cols"])
        except (KeyError, ValueError):
            raise ValueError(f"{path}: header must give rows and cols") from None
        data = [[float(v) for v in line.strip().split(",")] for line in fh if line.strip()]
    arr = np.array(data, dtype=float)
    if arr.shape != (rows, cols):
        raise ValueError(f"{path}: header says {rows}x{cols}, body is {arr.shape}")
    return ScalarImage(rows, cols, arr, fields.get("channel", ""))


def write_pgm16(img: ScalarImage, path) -> None:
    """16-bit binary PGM of the finite range; missing pixels are black."""
    d = img.data
    finite = np.isfinite(d)
    out = np.zeros(d.shape, dtype=">u2")
    if finite.any():
        lo, hi = d[finite].min(), d[finite].max()
        scaled = np.zeros_like(d) if hi == lo else (d - lo) / (hi - lo)
        out[finite] = np.rint(scaled[finite] * 65535).astype(np.uint16)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.cols} {img.rows}\n65535\n".encode("ascii"))
        fh.write(out.tobytes())
