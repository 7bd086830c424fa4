"""Seeded xoshiro256** generator with splitmix64 seed expansion.

The scalar path is plain Python integer arithmetic; bulk draws go through a
compiled loop over the same state, so interleaving the two is safe.
"""
import math

import numpy as np

from .kernels import xoshiro_fill

_M64 = (1 << 64) - 1
_TWO_PI = 2.0 * math.pi


def splitmix64(x):
    """Return ``(next_state, output)`` for one splitmix64 step."""
    x = (x + 0x9E3779B97F4A7C15) & _M64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _M64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _M64
    return x, z ^ (z >> 31)


def _rotl(x, k):
    return ((x << k) | (x >> (64 - k))) & _M64


class Prng:
    """xoshiro256** stream. Single-owner, mutable."""

    def __init__(self, seed: int):
        self.seed = int(seed) & _M64
        s = self.seed
        words = []
        for _ in range(4):
            s, out = splitmix64(s)
            words.append(out)
        self._s = words

    def next_u64(self) -> int:
        s0, s1, s2, s3 = self._s
        result = (_rotl((s1 * 5) & _M64, 7) * 9) & _M64
        t = (s1 << 17) & _M64
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
        self._s = [s0, s1, s2, s3]
        return result

    def u64_array(self, n: int) -> np.ndarray:
        state = np.array(self._s, dtype=np.uint64)
        out = xoshiro_fill(state, int(n))
        self._s = [int(w) for w in state]
        return out

    def random(self) -> float:
        """Uniform double in [0, 1) with 53 random bits."""
        return (self.next_u64() >> 11) * (1.0 / 9007199254740992.0)

    def random_array(self, n: int) -> np.ndarray:
        return (self.u64_array(n) >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)

    def below(self, n: int) -> int:
        """Unbiased integer in [0, n)."""
        if n <= 0:
            raise ValueError("below() needs n >= 1")
        threshold = ((1 << 64) - n) % n
        while True:
            x = self.next_u64()
            if x >= threshold:
                return x % n

    def normal_array(self, n: int) -> np.ndarray:
        """Standard normals by Box-Muller; consumes two words per value."""
        u = self.random_array(2 * int(n))
        u1 = 1.0 - u[0::2]
        u2 = u[1::2]
        return np.sqrt(-2.0 * np.log(u1)) * np.cos(_TWO_PI * u2)

    def normal(self) -> float:
        return float(self.normal_array(1)[0])

    def fork(self) -> "Prng":
        """Independent child stream seeded from this one."""
        return Prng(self.next_u64())

    def getstate(self):
        return tuple(self._s)


def sample_without_replacement(n: int, k: int, rng: Prng) -> list[int]:
    """``k`` distinct values from ``1..n`` by partial Fisher-Yates, sorted."""
    if k < 1 or n < 1:
        raise ValueError("need 1 <= k <= n")
    if k > n:
        raise ValueError(f"cannot draw {k} distinct values from {n}")
    pool = list(range(1, n + 1))
    for i in range(k):
        j = i + rng.below(n - i)
        pool[i], pool[j] = pool[j], pool[i]
    return sorted(pool[:k])
