"""SplitMix64 pseudo-random generator.

Every stochastic choice in the package (initialisation, shuffling, negative
sampling, corpus synthesis) draws from this generator so that runs are
bit-reproducible independent of the numpy version.

Algorithm (Steele, Lea & Flood 2014)::

    state += 0x9E3779B97F4A7C15
    z = state
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB
    return z ^ (z >> 31)

all arithmetic modulo 2**64. Uniforms take the top 53 bits; normals use the
cosine branch of Box-Muller on two consecutive uniforms.
"""

from __future__ import annotations

import numpy as np

GAMMA = 0x9E3779B97F4A7C15
_MASK = (1 << 64) - 1
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def mix64(*keys: int) -> int:
    """Hash a tuple of integers into a 64-bit seed."""
    h = 0
    for k in keys:
        h = (h + GAMMA + (int(k) & _MASK)) & _MASK
        h = int(_mix(np.array([h], dtype=np.uint64))[0])
    return h


class SplitMix64:
    def __init__(self, seed: int = 0):
        self.state = int(seed) & _MASK

    def spawn(self, *keys: int) -> "SplitMix64":
        """Independent child stream; does not advance this generator."""
        return SplitMix64(mix64(self.state, *keys))

    def next_u64(self, n: int) -> np.ndarray:
        with np.errstate(over="ignore"):
            steps = np.arange(1, n + 1, dtype=np.uint64) * np.uint64(GAMMA)
            z = np.uint64(self.state) + steps
        self.state = (self.state + n * GAMMA) & _MASK
        return _mix(z)

    def uniform(self, size=None) -> np.ndarray | float:
        n = 1 if size is None else int(np.prod(size))
        u = (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))
        return float(u[0]) if size is None else u.reshape(size)

    def normal(self, size=None, scale: float = 1.0) -> np.ndarray | float:
        n = 1 if size is None else int(np.prod(size))
        u = self.uniform(2 * n)
        u1 = 1.0 - u[:n]  # (0, 1]
        z = np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u[n:])
        z = z * scale
        return float(z[0]) if size is None else z.reshape(size)

    def integers(self, high: int, size=None) -> np.ndarray | int:
        """Uniform integers in ``[0, high)``."""
        if high <= 0:
            raise ValueError("high must be positive")
        u = self.uniform(1 if size is None else size)
        r = np.minimum(np.floor(np.asarray(u) * high), high - 1).astype(np.int64)
        return int(r.reshape(-1)[0]) if size is None else r

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.uniform(n), kind="stable")

    def choice(self, options, size=None):
        idx = self.integers(len(options), size)
        if size is None:
            return options[idx]
        return [options[i] for i in np.asarray(idx).reshape(-1)]
