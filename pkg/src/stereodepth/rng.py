"""Deterministic pseudo-random numbers.

Every random draw in the package flows from one integer seed through this
module so that runs are reproducible bit for bit, and so the streams can be
re-implemented in any language:

* ``splitmix64`` expands a 64-bit seed into the 256-bit xoshiro state and is
  also used to derive independent child seeds (stream splitting).
* ``Xoshiro256`` is xoshiro256** (Blackman & Vigna), a member of the
  xorshift family.
* Floats are ``(next() >> 11) * 2**-53``, i.e. uniform on [0, 1) with 53 bits.

Child seeds: ``derive_seed(seed, *labels)`` folds each label into the seed.
A label is hashed with 64-bit FNV-1a over its UTF-8 text (integers use their
decimal text), then ``state = splitmix64_mix(state ^ label_hash)``.
"""
from __future__ import annotations

import numpy as np

MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3


def splitmix64_mix(z: int) -> int:
    """The splitmix64 output function applied to ``z + golden``."""
    z = (z + _GOLDEN) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def splitmix64_stream(seed: int, n: int) -> list[int]:
    out = []
    state = seed & MASK64
    for _ in range(n):
        out.append(splitmix64_mix(state))
        state = (state + _GOLDEN) & MASK64
    return out


def _fnv1a(text: str) -> int:
    h = _FNV_OFFSET
    for byte in text.encode("utf-8"):
        h = ((h ^ byte) * _FNV_PRIME) & MASK64
    return h


def derive_seed(seed: int, *labels: str | int) -> int:
    state = seed & MASK64
    for label in labels:
        state = splitmix64_mix(state ^ _fnv1a(str(label)))
    return state


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & MASK64


class Xoshiro256:
    """xoshiro256** seeded through splitmix64."""

    def __init__(self, seed: int):
        self.seed = seed & MASK64
        self.s = splitmix64_stream(self.seed, 4)
        if not any(self.s):  # all-zero state is a fixed point
            self.s[0] = 1

    def next_u64(self) -> int:
        s = self.s
        result = (_rotl((s[1] * 5) & MASK64, 7) * 9) & MASK64
        t = (s[1] << 17) & MASK64
        s[2] ^= s[0]
        s[3] ^= s[1]
        s[1] ^= s[2]
        s[0] ^= s[3]
        s[2] ^= t
        s[3] = _rotl(s[3], 45)
        return result

    def random(self) -> float:
        return (self.next_u64() >> 11) * (1.0 / 9007199254740992.0)

    def uniform(self, low: float, high: float) -> float:
        return low + (high - low) * self.random()

    def randint(self, low: int, high: int) -> int:
        """Uniform integer in the closed range [low, high]."""
        if high < low:
            raise ValueError(f"empty range [{low}, {high}]")
        span = high - low + 1
        # rejection sampling keeps the draw unbiased
        limit = (1 << 64) - ((1 << 64) % span)
        while True:
            r = self.next_u64()
            if r < limit:
                return low + r % span

    def bernoulli(self, p: float) -> bool:
        return self.random() < p

    def random_array(self, shape) -> np.ndarray:
        n = int(np.prod(shape, dtype=np.int64))
        return np.array([self.random() for _ in range(n)], dtype=np.float64).reshape(shape)

    def uniform_array(self, low: float, high: float, shape) -> np.ndarray:
        return low + (high - low) * self.random_array(shape)

    def permutation(self, n: int) -> list[int]:
        """Fisher-Yates shuffle of range(n)."""
        items = list(range(n))
        for i in range(n - 1, 0, -1):
            j = self.randint(0, i)
            items[i], items[j] = items[j], items[i]
        return items
