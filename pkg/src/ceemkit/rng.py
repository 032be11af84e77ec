"""Pinned, platform-independent pseudo random numbers.

The generator is SplitMix64 used directly as a stream::

    state <- state + 0x9E3779B97F4A7C15          (mod 2**64)
    z <- state
    z <- (z XOR (z >> 30)) * 0xBF58476D1CE4E5B9  (mod 2**64)
    z <- (z XOR (z >> 27)) * 0x94D049BB133111EB  (mod 2**64)
    out <- z XOR (z >> 31)

Because the i-th output depends only on ``seed + i * gamma`` the stream can be
produced in vectorised blocks with identical results to a scalar loop.
Uniform doubles take the top 53 bits: ``(out >> 11) * 2**-53``.
"""

from __future__ import annotations

import zlib

import numpy as np

GAMMA = 0x9E3779B97F4A7C15
MASK64 = (1 << 64) - 1
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def splitmix64(x: int) -> int:
    """One scalar SplitMix64 step applied to ``x`` (used for seed derivation)."""
    with np.errstate(over="ignore"):
        return int(_mix(np.array([(x + GAMMA) & MASK64], dtype=np.uint64))[0])


def derive_seed(seed: int, label: str) -> int:
    """Stable child seed for a named sub-stream (e.g. one layer's init)."""
    return splitmix64((seed & MASK64) ^ zlib.crc32(label.encode("utf-8")))


class Rng:
    def __init__(self, seed: int = 0):
        if seed < 0:
            raise ValueError("seed must be non-negative")
        self.seed = seed & MASK64
        self._state = self.seed

    def next_u64(self, n: int) -> np.ndarray:
        """Next ``n`` raw 64-bit outputs."""
        steps = np.arange(1, n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            z = np.uint64(self._state) + steps * np.uint64(GAMMA)
            out = _mix(z)
        self._state = (self._state + n * GAMMA) & MASK64
        return out

    def uniform(self, n: int, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        u = (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        return low + (high - low) * u

    def normal(self, n: int) -> np.ndarray:
        """Standard normals by Box-Muller; consumes ``2 * ceil(n / 2)`` draws."""
        m = (n + 1) // 2
        u1 = self.uniform(m)
        u2 = self.uniform(m)
        r = np.sqrt(-2.0 * np.log1p(-u1))  # 1 - u1 lies in (0, 1]
        z = np.concatenate([r * np.cos(2 * np.pi * u2), r * np.sin(2 * np.pi * u2)])
        return z[:n]

    def permutation(self, n: int) -> np.ndarray:
        # argsort of fresh 64-bit keys; stable sort makes ties (p ~ 2**-64) deterministic
        return np.argsort(self.next_u64(n), kind="stable")

    def integers(self, n: int, high: int) -> np.ndarray:
        """``n`` integers in ``[0, high)`` (multiply-shift, bias below 2**-40 for small high)."""
        return np.floor(self.uniform(n) * high).astype(np.int64)
