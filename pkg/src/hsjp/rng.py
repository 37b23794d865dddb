"""Seedable 64-bit random stream used for shuffles, augmentation and init.

The generator is xoshiro256** with its four 64-bit state words filled from a
splitmix64 sequence started at the user seed.  Update rule per draw::

    result = rotl(s1 * 5, 7) * 9
    t  = s1 << 17
    s2 ^= s0; s3 ^= s1; s1 ^= s2; s0 ^= s3
    s2 ^= t;  s3 = rotl(s3, 45)

All arithmetic is modulo 2**64.  Scalar draws come straight from this
stream; bulk array draws go through a numpy ``Generator`` whose PCG64 seed
is the next 64-bit output, so array randomness is still a pure function of
the user seed.
"""

from __future__ import annotations

import numpy as np

MASK64 = (1 << 64) - 1


def splitmix64(state: int) -> tuple[int, int]:
    """Advance a splitmix64 state; returns ``(new_state, output)``."""
    state = (state + 0x9E3779B97F4A7C15) & MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return state, z ^ (z >> 31)


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & MASK64


def derive_seed(seed: int, *keys: int) -> int:
    """Mix ``seed`` with integer keys (worker index, step, ...) into a new seed."""
    state = seed & MASK64
    for key in keys:
        state, out = splitmix64(state ^ (key & MASK64))
        state = out
    _, out = splitmix64(state)
    return out


class Rng:
    """xoshiro256** stream.  Caller-owned; never shared implicitly."""

    def __init__(self, seed: int = 0):
        self.seed = int(seed) & MASK64
        sm = self.seed
        words = []
        for _ in range(4):
            sm, out = splitmix64(sm)
            words.append(out)
        self._s = words

    def next_u64(self) -> int:
        s0, s1, s2, s3 = self._s
        result = (_rotl((s1 * 5) & MASK64, 7) * 9) & MASK64
        t = (s1 << 17) & MASK64
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
        self._s = [s0, s1, s2, s3]
        return result

    def randbelow(self, bound: int) -> int:
        """Unbiased integer in ``[0, bound)`` (Lemire's multiply-shift with rejection)."""
        if bound <= 0:
            raise ValueError(f"bound must be positive, got {bound}")
        m = self.next_u64() * bound
        low = m & MASK64
        if low < bound:
            threshold = ((1 << 64) - bound) % bound
            while low < threshold:
                m = self.next_u64() * bound
                low = m & MASK64
        return m >> 64

    def random(self) -> float:
        """Uniform float in ``[0, 1)`` with 53 random bits."""
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def uniform(self, low: float, high: float) -> float:
        return low + (high - low) * self.random()

    def bernoulli(self, p: float) -> bool:
        return self.random() < p

    def numpy(self) -> np.random.Generator:
        """A numpy generator seeded from the next output of this stream."""
        return np.random.Generator(np.random.PCG64(self.next_u64()))

    def spawn(self) -> "Rng":
        """Independent child stream; advances this stream by one draw."""
        return Rng(self.next_u64())

    def getstate(self) -> tuple[int, int, int, int, int]:
        return (self.seed, *self._s)

    def setstate(self, state) -> None:
        self.seed = state[0]
        self._s = list(state[1:])
