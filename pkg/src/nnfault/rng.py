"""Counter-based SplitMix64 generator.

Every random choice in the package (datasets, weight init, fault sampling,
minibatch order) goes through this module so results are bit-identical on
any platform with IEEE-754 doubles. The recurrence is::

    z  = seed + (i + 1) * 0x9E3779B97F4A7C15        (mod 2**64)
    z  = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
    z  = (z ^ (z >> 27)) * 0x94D049BB133111EB
    out_i = z ^ (z >> 31)

where ``i`` is a per-generator counter that advances by one per word drawn.
Uniform doubles take the top 53 bits: ``(out >> 11) * 2**-53``.

Normal draws use Box-Muller on two consecutive uniforms and therefore depend
on the platform's ``log``/``cos``; everything else is pure integer arithmetic.
"""

from __future__ import annotations

import numpy as np

GOLDEN = 0x9E3779B97F4A7C15
_M1 = 0xBF58476D1CE4E5B9
_M2 = 0x94D049BB133111EB
_MASK = (1 << 64) - 1


def mix64(z: int) -> int:
    """Scalar SplitMix64 finalizer."""
    z &= _MASK
    z = ((z ^ (z >> 30)) * _M1) & _MASK
    z = ((z ^ (z >> 27)) * _M2) & _MASK
    return z ^ (z >> 31)


def fnv1a64(text: str) -> int:
    h = 0xCBF29CE484222325
    for byte in text.encode("utf-8"):
        h ^= byte
        h = (h * 0x100000001B3) & _MASK
    return h


def derive_seed(*parts: int | str | float) -> int:
    """Fold a tuple of seeds/tags into one 64-bit seed.

    Strings are hashed with FNV-1a, floats contribute their IEEE-754 bit pattern.
    """
    h = 0
    for p in parts:
        if isinstance(p, str):
            v = fnv1a64(p)
        elif isinstance(p, float):
            v = int(np.float64(p).view(np.uint64))
        else:
            v = int(p) & _MASK
        h = mix64(h ^ mix64(v + GOLDEN))
    return h


class SplitMix64:
    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK
        self.counter = 0

    def u64(self, n: int) -> np.ndarray:
        i = np.arange(self.counter + 1, self.counter + 1 + n, dtype=np.uint64)
        self.counter += n
        z = np.uint64(self.seed) + i * np.uint64(GOLDEN)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(_M1)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(_M2)
        return z ^ (z >> np.uint64(31))

    def uniform(self, n: int) -> np.ndarray:
        """Doubles in [0, 1)."""
        return (self.u64(n) >> np.uint64(11)).astype(np.float64) * (2.0**-53)

    def normal(self, n: int) -> np.ndarray:
        u = self.uniform(2 * n)
        u1, u2 = u[0::2], u[1::2]
        return np.sqrt(-2.0 * np.log1p(-u1)) * np.cos(2.0 * np.pi * u2)

    def integers(self, high: int, n: int) -> np.ndarray:
        """Integers in [0, high) via multiply-shift on the top 32 bits (high < 2**32)."""
        if not 0 < high <= 1 << 32:
            raise ValueError(f"high must be in (0, 2**32], got {high}")
        top = self.u64(n) >> np.uint64(32)
        return ((top * np.uint64(high)) >> np.uint64(32)).astype(np.int64)

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.u64(n), kind="stable")

    def sample_without_replacement(self, population: int, k: int) -> np.ndarray:
        """``k`` distinct values from ``range(population)``, in draw order."""
        if not 0 <= k <= population:
            raise ValueError(f"cannot draw {k} distinct items from {population}")
        if k == 0:
            return np.empty(0, dtype=np.int64)
        keys = self.u64(population)
        if k == population:
            return np.argsort(keys, kind="stable")
        part = np.argpartition(keys, k - 1)[:k]
        return part[np.argsort(keys[part], kind="stable")]
