"""Dense arithmetic helpers and a seeded, platform-independent generator.

Matrices are plain ``numpy.ndarray`` objects of dtype float64 stored in
row-major (C) order.  The random generator is SplitMix64 evaluated in
counter mode: draw ``i`` of a stream seeded with ``s`` is
``mix(s + (i + 1) * GAMMA)``, so a block of draws is a single vectorised
expression and identical on every platform.
"""
from __future__ import annotations

import numpy as np

GAMMA = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_MASK64 = (1 << 64) - 1


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


class Rng:
    """SplitMix64 stream.  Single owner; ``spawn`` derives independent streams."""

    def __init__(self, seed: int = 0):
        self.seed = int(seed) & _MASK64
        self.counter = 0

    def __repr__(self):
        return f"Rng(seed={self.seed}, counter={self.counter})"

    def next_u64(self, size: int) -> np.ndarray:
        idx = np.arange(self.counter + 1, self.counter + 1 + size, dtype=np.uint64)
        self.counter += size
        with np.errstate(over="ignore"):
            return _mix(np.uint64(self.seed) + idx * GAMMA)

    def random(self, size: int | tuple = 1) -> np.ndarray:
        """Uniform doubles in [0, 1) built from the top 53 bits."""
        shape = (size,) if np.isscalar(size) else tuple(size)
        n = int(np.prod(shape)) if shape else 1
        u = (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        return u.reshape(shape)

    def uniform(self, lo: float, hi: float, size) -> np.ndarray:
        if not lo < hi:
            raise ValueError(f"uniform bounds need lo < hi, got lo={lo}, hi={hi}")
        return lo + (hi - lo) * self.random(size)

    def permutation(self, n: int) -> np.ndarray:
        # argsort of random keys; stable sort makes ties (p ~ 2^-64) deterministic
        return np.argsort(self.next_u64(n), kind="stable")

    def spawn(self, key: int) -> "Rng":
        """Child stream keyed by ``key``; does not advance this stream."""
        return Rng(_mix_int(self.seed ^ _mix_int((key * 0x9E3779B97F4A7C15 + 1) & _MASK64)))


def _mix_int(z: int) -> int:
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with an explicit shape check."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    return a @ b


def uniform_init(rng: Rng, rows: int, cols: int, lo: float, hi: float) -> np.ndarray:
    """``rows x cols`` matrix of i.i.d. uniform entries in ``[lo, hi)``."""
    if rows < 1 or cols < 1:
        raise ValueError(f"matrix dims must be positive, got ({rows}, {cols})")
    return rng.uniform(lo, hi, (rows, cols))
