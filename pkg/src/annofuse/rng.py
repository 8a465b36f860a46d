"""SplitMix64 random stream.

The synthetic corpus must be reproducible from a seed in any language, so
draws come from SplitMix64 (Steele, Lea & Flood 2014) rather than numpy's
bit generators, whose distribution samplers are implementation-specific.

Constants::

    GAMMA = 0x9E3779B97F4A7C15
    mix(z): z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
            z = (z ^ (z >> 27)) * 0x94D049BB133111EB
            return z ^ (z >> 31)
    next(): state += GAMMA; return mix(state)          (all mod 2**64)

Derived variates:

* uniform in [0, 1): ``(next() >> 11) * 2**-53``
* integer in [lo, hi]: ``lo + floor(uniform * (hi - lo + 1))``
* normal: Box-Muller from two uniforms u1, u2 (in that order),
  ``sqrt(-2 ln(1 - u1)) * cos(2 pi u2)``
* Poisson(lam): Knuth's product-of-uniforms method
* child seed for stream key ``k``: ``mix(seed ^ mix(k * GAMMA + STREAM_SALT))``
"""
from __future__ import annotations

import math

import numpy as np

MASK = (1 << 64) - 1
GAMMA = 0x9E3779B97F4A7C15
MUL1 = 0xBF58476D1CE4E5B9
MUL2 = 0x94D049BB133111EB
STREAM_SALT = 0x632BE59BD9B4E019


def mix64(z: int) -> int:
    z &= MASK
    z = ((z ^ (z >> 30)) * MUL1) & MASK
    z = ((z ^ (z >> 27)) * MUL2) & MASK
    return z ^ (z >> 31)


def derive_seed(seed: int, *keys: int) -> int:
    s = seed & MASK
    for k in keys:
        s = mix64(s ^ mix64((k * GAMMA + STREAM_SALT) & MASK))
    return s


def _mix64_array(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * np.uint64(MUL1)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(MUL2)
    return z ^ (z >> np.uint64(31))


class SplitMix64:
    def __init__(self, seed: int):
        self.state = seed & MASK

    def next_u64(self) -> int:
        self.state = (self.state + GAMMA) & MASK
        return mix64(self.state)

    def uniform(self) -> float:
        return (self.next_u64() >> 11) * 2.0**-53

    def uniforms(self, n: int) -> np.ndarray:
        """``n`` uniforms, identical to ``n`` successive :meth:`uniform` calls."""
        if n <= 0:
            return np.empty(0)
        with np.errstate(over="ignore"):
            steps = np.arange(1, n + 1, dtype=np.uint64) * np.uint64(GAMMA)
            states = steps + np.uint64(self.state)
            out = _mix64_array(states)
        self.state = (self.state + n * GAMMA) & MASK
        return (out >> np.uint64(11)).astype(np.float64) * 2.0**-53

    def integer(self, lo: int, hi: int) -> int:
        """Uniform integer in the closed range ``[lo, hi]``."""
        if hi < lo:
            raise ValueError(f"empty range [{lo}, {hi}]")
        return lo + int(self.uniform() * (hi - lo + 1))

    def normal(self, sigma: float = 1.0) -> float:
        u1 = self.uniform()
        u2 = self.uniform()
        return sigma * math.sqrt(-2.0 * math.log(1.0 - u1)) * math.cos(2.0 * math.pi * u2)

    def normals(self, n: int, sigma: float = 1.0) -> np.ndarray:
        u = self.uniforms(2 * n).reshape(n, 2)
        return sigma * np.sqrt(-2.0 * np.log(1.0 - u[:, 0])) * np.cos(2.0 * np.pi * u[:, 1])

    def poisson(self, lam: float) -> int:
        if lam <= 0:
            return 0
        limit = math.exp(-lam)
        k, p = 0, self.uniform()
        while p > limit:
            k += 1
            p *= self.uniform()
        return k
