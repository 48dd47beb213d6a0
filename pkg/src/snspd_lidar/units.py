"""Physical constants and the time-of-flight / range conversions.

Internally every time is a float in picoseconds and every length a float in
millimetres. The aliases below only document that convention; all functions
accept scalars or numpy arrays.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

TimePs = float
LengthMm = float


@dataclass(frozen=True)
class Constants:
    c: float = 299_792_458.0  # m/s, exact

    @property
    def c_mm_per_ps(self) -> float:
        return self.c * 1e3 * 1e-12


CONSTANTS = Constants()
C_MM_PER_PS = CONSTANTS.c_mm_per_ps
FWHM_PER_SIGMA = 2.0 * math.sqrt(2.0 * math.log(2.0))


def _scalar_or_array(x):
    return float(x) if np.ndim(x) == 0 else np.asarray(x, dtype=float)


def tof_to_distance(t_tof, t_0=0.0):
    """Range in mm for a round-trip latency ``t_tof`` measured from ``t_0`` (both ps)."""
    return 0.5 * C_MM_PER_PS * (_scalar_or_array(t_tof) - t_0)


def distance_to_tof(d, t_0=0.0):
    """Round-trip latency in ps for a range ``d`` in mm; inverse of :func:`tof_to_distance`."""
    return _scalar_or_array(d) / (0.5 * C_MM_PER_PS) + t_0


def round_trip_ps(d):
    """Round-trip time for a one-way path ``d`` (mm), without any offset."""
    return distance_to_tof(d, 0.0)


def fwhm_from_sigma(sigma):
    if np.any(np.asarray(sigma) < 0):
        raise ValueError("sigma must be non-negative")
    return FWHM_PER_SIGMA * sigma


def sigma_from_fwhm(fwhm):
    if np.any(np.asarray(fwhm) < 0):
        raise ValueError("fwhm must be non-negative")
    return fwhm / FWHM_PER_SIGMA
