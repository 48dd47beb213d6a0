"""Deterministic random streams.

Every stochastic operation takes an explicit ``numpy.random.Generator``. Pixel
streams are derived from ``(master_seed, row, col)`` through ``SeedSequence``
spawn keys, so a pixel's draws do not depend on which worker processes it or
in which order.
"""
from __future__ import annotations

import numpy as np

RngStream = np.random.Generator


def stream(master_seed: int, *key: int) -> np.random.Generator:
    seq = np.random.SeedSequence(int(master_seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.PCG64(seq))


def pixel_stream(master_seed: int, row: int, col: int) -> np.random.Generator:
    return stream(master_seed, 0, row, col)
