"""Deterministic pseudo-random streams (splitmix64).

Every stochastic artifact in this package -- synthetic scene noise and
untrained layer weights -- is derived from the splitmix64 generator so that a
spec plus a 64-bit seed pins the exact output values.  Gaussian variates use
the Box-Muller transform on splitmix64 uniforms.  No global state is involved:
each call takes an explicit seed.
"""

from __future__ import annotations

import numpy as np

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4B5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)

_TWO53 = float(1 << 53)


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


def raw_stream(seed: int, n: int, offset: int = 0) -> np.ndarray:
    """The first ``n`` splitmix64 outputs after ``offset`` for this seed."""
    if n < 0:
        raise ValueError(f"stream length must be >= 0, got {n}")
    idx = np.arange(offset + 1, offset + n + 1, dtype=np.uint64)
    return _mix(np.uint64(seed & 0xFFFFFFFFFFFFFFFF) + idx * _GAMMA)


def uniform(seed: int, n: int, low: float = 0.0, high: float = 1.0, offset: int = 0) -> np.ndarray:
    """``n`` float64 uniforms in [low, high) using the top 53 bits per draw."""
    u = (raw_stream(seed, n, offset) >> np.uint64(11)).astype(np.float64) / _TWO53
    return low + u * (high - low)


def normal(seed: int, n: int, offset: int = 0) -> np.ndarray:
    """``n`` standard-normal float64 draws via Box-Muller.

    Consumes two splitmix64 outputs per pair of normals; u1 is shifted into
    (0, 1] so the log never sees zero.
    """
    pairs = (n + 1) // 2
    raw = raw_stream(seed, 2 * pairs, offset)
    u1 = ((raw[0::2] >> np.uint64(11)).astype(np.float64) + 1.0) / _TWO53
    u2 = (raw[1::2] >> np.uint64(11)).astype(np.float64) / _TWO53
    r = np.sqrt(-2.0 * np.log(u1))
    theta = 2.0 * np.pi * u2
    out = np.empty(2 * pairs, dtype=np.float64)
    out[0::2] = r * np.cos(theta)
    out[1::2] = r * np.sin(theta)
    return out[:n]
