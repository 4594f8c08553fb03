"""Deterministic pseudo-random streams (splitmix64 + xoshiro256++).

Every stochastic component in the package draws from these generators rather
than from numpy's, so a run is reproducible bit-for-bit from its integer seed
regardless of the numpy version in use, and the streams themselves are simple
enough to re-derive in any language.

Bulk array draws are vectorised: requesting an array consumes exactly one
64-bit output of the sequential stream, which keys a counter-mode splitmix64
substream that fills the array. Scalar draws advance the xoshiro256++ state
one output at a time.
"""

from __future__ import annotations

import math

import numpy as np

MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB
_INV_2_53 = 2.0**-53


def splitmix64(state: int) -> tuple[int, int]:
    """Advance a splitmix64 state once. Returns ``(next_state, output)``."""
    state = (state + _GOLDEN) & MASK64
    z = state
    z = ((z ^ (z >> 30)) * _MIX1) & MASK64
    z = ((z ^ (z >> 27)) * _MIX2) & MASK64
    return state, z ^ (z >> 31)


def derive_seed(seed: int, index: int) -> int:
    """Substream seed for item ``index``: (seed XOR index) through splitmix64."""
    _, out = splitmix64((seed & MASK64) ^ (index & MASK64))
    return out


def _mix64_vec(x: np.ndarray) -> np.ndarray:
    # splitmix64 finaliser on a uint64 array; multiplication wraps mod 2**64
    x = (x ^ (x >> np.uint64(30))) * np.uint64(_MIX1)
    x = (x ^ (x >> np.uint64(27))) * np.uint64(_MIX2)
    return x ^ (x >> np.uint64(31))


def bulk_uniform(key: int, n: int) -> np.ndarray:
    """``n`` float64 values in [0, 1) from counter-mode splitmix64 under ``key``.

    Output ``i`` is the splitmix64 finaliser applied to ``key + (i+1)*GOLDEN``,
    i.e. the ordinary splitmix64 stream seeded at ``key``, computed without
    sequential state.
    """
    if n == 0:
        return np.zeros(0)
    counters = np.arange(1, n + 1, dtype=np.uint64) * np.uint64(_GOLDEN)
    bits = _mix64_vec(counters + np.uint64(key & MASK64))
    return (bits >> np.uint64(11)).astype(np.float64) * _INV_2_53


def bulk_normal(key: int, n: int) -> np.ndarray:
    """``n`` standard-normal float64 values (Box-Muller over :func:`bulk_uniform`)."""
    if n == 0:
        return np.zeros(0)
    pairs = (n + 1) // 2
    u = bulk_uniform(key, 2 * pairs)
    # interleaved pairing keeps prefixes stable across different n
    u1, u2 = u[0::2], u[1::2]
    # u1 in [0,1) so 1-u1 in (0,1]: log never sees zero
    radius = np.sqrt(-2.0 * np.log1p(-u1))
    theta = (2.0 * math.pi) * u2
    out = np.empty(2 * pairs)
    out[0::2] = radius * np.cos(theta)
    out[1::2] = radius * np.sin(theta)
    return out[:n]


class Xoshiro256pp:
    """Sequential xoshiro256++ stream, state seeded through splitmix64."""

    __slots__ = ("_s",)

    def __init__(self, seed: int):
        state = seed & MASK64
        s = []
        for _ in range(4):
            state, out = splitmix64(state)
            s.append(out)
        self._s = s

    def next_u64(self) -> int:
        s0, s1, s2, s3 = self._s
        tmp = (s0 + s3) & MASK64
        result = (((tmp << 23) | (tmp >> 41)) + s0) & MASK64
        t = (s1 << 17) & MASK64
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = ((s3 << 45) | (s3 >> 19)) & MASK64
        self._s = [s0, s1, s2, s3]
        return result

    def uniform(self, lo: float = 0.0, hi: float = 1.0) -> float:
        u = (self.next_u64() >> 11) * _INV_2_53
        return lo + (hi - lo) * u

    def normal(self) -> float:
        u1 = (self.next_u64() >> 11) * _INV_2_53
        u2 = (self.next_u64() >> 11) * _INV_2_53
        return math.sqrt(-2.0 * math.log1p(-u1)) * math.cos(2.0 * math.pi * u2)

    def randint(self, n: int) -> int:
        """Integer in [0, n) via multiply-shift (bias < n / 2**64)."""
        if n <= 0:
            raise ValueError("randint bound must be positive")
        return (self.next_u64() * n) >> 64

    def choice(self, seq):
        return seq[self.randint(len(seq))]

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates permutation of range(n)."""
        idx = np.arange(n)
        for i in range(n - 1, 0, -1):
            j = self.randint(i + 1)
            idx[i], idx[j] = idx[j], idx[i]
        return idx

    def uniforms(self, n: int) -> np.ndarray:
        """Bulk uniforms; consumes one sequential output as the block key."""
        return bulk_uniform(self.next_u64(), n)

    def normals(self, n: int) -> np.ndarray:
        """Bulk standard normals; consumes one sequential output as the block key."""
        return bulk_normal(self.next_u64(), n)

    def spawn(self) -> "Xoshiro256pp":
        """Independent child stream keyed off the next output."""
        return Xoshiro256pp(self.next_u64())
