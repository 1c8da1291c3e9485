"""Deterministic pseudo-random numbers from a splitmix-style 64-bit state.

Every source of randomness in the package (parameter initialisation,
dropout masks, batch shuffling, corpus synthesis) draws from one of these
generators, so a single seed fixes a run bit-for-bit.  The update rule is
the classic splitmix64 sequence:

    state  <- state + 0x9E3779B97F4A7C15          (mod 2^64)
    output <- mix(state)

where mix xors and multiplies with the constants below.  Floats use the
top 53 bits of the output, giving uniform values in [0, 1).
"""

from __future__ import annotations

import numpy as np

_MASK = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB


def _mix(z: int) -> int:
    z = ((z ^ (z >> 30)) * _MIX1) & _MASK
    z = ((z ^ (z >> 27)) * _MIX2) & _MASK
    return z ^ (z >> 31)


class SplitMix64:
    """Seedable generator; `fork` derives an independent child stream."""

    def __init__(self, seed: int):
        self._state = seed & _MASK

    def next_u64(self) -> int:
        self._state = (self._state + _GAMMA) & _MASK
        return _mix(self._state)

    def next_float(self) -> float:
        return (self.next_u64() >> 11) * 2.0**-53

    def floats(self, n: int) -> np.ndarray:
        """Vectorised batch of `n` floats, identical to n next_float calls."""
        if n == 0:
            return np.empty(0, dtype=np.float64)
        steps = np.arange(1, n + 1, dtype=np.uint64)
        z = np.uint64(self._state) + steps * np.uint64(_GAMMA)
        self._state = int(z[-1])
        z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
        z = z ^ (z >> np.uint64(31))
        return (z >> np.uint64(11)).astype(np.float64) * 2.0**-53

    def uniform(self, lo: float, hi: float) -> float:
        return lo + (hi - lo) * self.next_float()

    def uniform_array(self, shape, lo: float, hi: float) -> np.ndarray:
        n = int(np.prod(shape)) if shape else 1
        return (lo + (hi - lo) * self.floats(n)).reshape(shape)

    def randint(self, n: int) -> int:
        """Uniform integer in [0, n), rejection-sampled to avoid modulo bias."""
        if n <= 0:
            raise ValueError("randint bound must be positive")
        limit = (1 << 64) - ((1 << 64) % n)
        while True:
            v = self.next_u64()
            if v < limit:
                return v % n

    def choice(self, seq):
        return seq[self.randint(len(seq))]

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates shuffle."""
        for i in range(len(items) - 1, 0, -1):
            j = self.randint(i + 1)
            items[i], items[j] = items[j], items[i]

    def fork(self) -> "SplitMix64":
        return SplitMix64(self.next_u64())
