"""Deterministic PCG32 random number generator.

All stochastic call sites in this package take an explicit ``Pcg32`` so that
every artifact (benchmark frames, perturbations, reports) is reproducible
bit-for-bit from a (seed, stream) pair. The integer path is exact and
portable; ``normal`` goes through libm and is only guaranteed reproducible
on a fixed platform.
"""

from __future__ import annotations

import hashlib

import numpy as np

_MULT = 6364136223846793005
_MASK64 = (1 << 64) - 1

# 2^53 and the shifts used to build a double from two 32-bit draws
_DENOM53 = float(1 << 53)


def stable_stream(name: str) -> int:
    """Map an arbitrary string to a 64-bit stream id (sha256 based)."""
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


class Pcg32:
    """PCG-XSH-RR 64/32 generator with a selectable stream.

    Identical (seed, stream) pairs produce identical outputs on every
    platform for the integer and uniform paths.
    """

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed) & _MASK64
        self.stream = int(stream) & _MASK64
        self._inc = ((self.stream << 1) | 1) & _MASK64
        self._state = 0
        self._step()
        self._state = (self._state + self.seed) & _MASK64
        self._step()

    def _step(self) -> None:
        self._state = (self._state * _MULT + self._inc) & _MASK64

    def next_u32(self) -> int:
        old = self._state
        self._step()
        xorshifted = (((old >> 18) ^ old) >> 27) & 0xFFFFFFFF
        rot = old >> 59
        return ((xorshifted >> rot) | (xorshifted << ((-rot) & 31))) & 0xFFFFFFFF

    def next_u32_block(self, n: int) -> np.ndarray:
        """Vectorized batch of ``n`` draws, identical to n scalar calls.

        Uses the closed form state_{k} = a^k * state + c * (a^{k-1}+...+1)
        evaluated with wrapping uint64 arithmetic.
        """
        if n < 0:
            raise ValueError("n must be >= 0")
        if n == 0:
            return np.empty(0, dtype=np.uint32)
        with np.errstate(over="ignore"):
            a = np.uint64(_MULT)
            c = np.uint64(self._inc)
            powers = np.empty(n + 1, dtype=np.uint64)
            geom = np.empty(n + 1, dtype=np.uint64)
            powers[0] = np.uint64(1)
            geom[0] = np.uint64(0)
            for i in range(1, n + 1):
                powers[i] = powers[i - 1] * a
                geom[i] = geom[i - 1] * a + np.uint64(1)
            states = powers[:n] * np.uint64(self._state) + geom[:n] * c
            self._state = int(powers[n] * np.uint64(self._state) + geom[n] * c)
            xorshifted = (((states >> np.uint64(18)) ^ states) >> np.uint64(27)).astype(
                np.uint32
            )
            rot = (states >> np.uint64(59)).astype(np.uint32)
            lo = np.uint32(31)
            neg_rot = (-rot.astype(np.int64)).astype(np.uint32) & lo
            return (xorshifted >> rot) | (xorshifted << neg_rot)

    def uniform(self, lo: float = 0.0, hi: float = 1.0) -> float:
        """Double in [lo, hi) with 53 bits of entropy (two u32 draws)."""
        a = self.next_u32() >> 5
        b = self.next_u32() >> 6
        u = (a * 67108864.0 + b) / _DENOM53
        return lo + (hi - lo) * u

    def uniform_block(self, n: int, lo: float = 0.0, hi: float = 1.0) -> np.ndarray:
        raw = self.next_u32_block(2 * n).astype(np.uint64)
        a = raw[0::2] >> np.uint64(5)
        b = raw[1::2] >> np.uint64(6)
        u = (a.astype(np.float64) * 67108864.0 + b.astype(np.float64)) / _DENOM53
        return lo + (hi - lo) * u

    def normal(self) -> float:
        """Standard normal via Box-Muller (consumes two uniforms)."""
        u1 = self.uniform()
        u2 = self.uniform()
        if u1 <= 0.0:
            u1 = 2.0 ** -53
        return float(np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2))

    def normal_block(self, n: int) -> np.ndarray:
        u = self.uniform_block(2 * n)
        u1 = np.maximum(u[0::2], 2.0 ** -53)
        u2 = u[1::2]
        return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)

    def randint(self, n: int) -> int:
        """Unbiased integer in [0, n) via rejection sampling."""
        if n <= 0:
            raise ValueError("n must be positive")
        threshold = (1 << 32) % n
        while True:
            r = self.next_u32()
            if r >= threshold:
                return r % n

    def choice(self, seq):
        if len(seq) == 0:
            raise ValueError("cannot choose from an empty sequence")
        return seq[self.randint(len(seq))]

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates shuffle."""
        for i in range(len(items) - 1, 0, -1):
            j = self.randint(i + 1)
            items[i], items[j] = items[j], items[i]

    def spawn(self, name: str) -> "Pcg32":
        """Independent generator on a stream derived from ``name``."""
        return Pcg32(self.seed, stream=self.stream ^ stable_stream(name))
