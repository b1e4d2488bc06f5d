"""Portable pseudo-random numbers: SplitMix64 seeding feeding xoshiro256**.

Everything random in the package (weight init, dropout masks, shuffling,
augmentation) draws from :class:`Rng`, so a seed pins results bit-for-bit on
any platform.
"""

from __future__ import annotations

import math

import numpy as np

MASK64 = (1 << 64) - 1
GOLDEN_GAMMA = 0x9E3779B97F4A7C15

# Bulk draws run this many independent xoshiro lanes side by side. Fixed so
# that array output does not depend on the machine.
BULK_LANES = 1024


def splitmix64_mix(z: int) -> int:
    """The SplitMix64 finalizer applied to a 64-bit integer."""
    z &= MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def splitmix64_stream(seed: int, n: int) -> list[int]:
    state = seed & MASK64
    out = []
    for _ in range(n):
        state = (state + GOLDEN_GAMMA) & MASK64
        out.append(splitmix64_mix(state))
    return out


def derive_seed(*parts: int) -> int:
    """Fold several integers (e.g. global seed, epoch, sample index) into one seed."""
    acc = 0
    for p in parts:
        acc = splitmix64_mix((acc + GOLDEN_GAMMA + splitmix64_mix(int(p) & MASK64)) & MASK64)
    return acc


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & MASK64


class Rng:
    """xoshiro256** generator seeded from a 64-bit integer through SplitMix64."""

    def __init__(self, seed: int = 0):
        self.seed = int(seed) & MASK64
        s = splitmix64_stream(self.seed, 4)
        if not any(s):
            s[0] = 1
        self._s = s

    @property
    def state(self) -> tuple[int, int, int, int]:
        return tuple(self._s)

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

    def random(self) -> float:
        """Uniform float in [0, 1) with 53 random mantissa bits."""
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def uniform(self, lo: float, hi: float) -> float:
        return lo + (hi - lo) * self.random()

    def randint(self, lo: int, hi: int) -> int:
        """Integer in the closed range [lo, hi], unbiased by rejection."""
        if hi < lo:
            raise ValueError(f"empty range [{lo}, {hi}]")
        span = hi - lo + 1
        limit = (1 << 64) - ((1 << 64) % span)
        while True:
            r = self.next_u64()
            if r < limit:
                return lo + r % span

    def normal(self) -> float:
        # Box-Muller; 1 - u keeps the log argument in (0, 1].
        u1 = 1.0 - self.random()
        u2 = self.random()
        return math.sqrt(-2.0 * math.log(u1)) * math.cos(2.0 * math.pi * u2)

    def permutation(self, n: int) -> list[int]:
        """Fisher-Yates shuffle of range(n)."""
        perm = list(range(n))
        for i in range(n - 1, 0, -1):
            j = self.randint(0, i)
            perm[i], perm[j] = perm[j], perm[i]
        return perm

    def spawn(self) -> "Rng":
        return Rng(self.next_u64())

    # -- bulk draws -------------------------------------------------------
    def u64_array(self, n: int) -> np.ndarray:
        """``n`` 64-bit outputs from BULK_LANES xoshiro lanes, step-major order.

        The lanes are seeded by SplitMix64 from a single draw of this stream,
        so the parent generator advances by exactly one step per call.
        """
        base = self.next_u64()
        if n <= 0:
            return np.zeros(0, dtype=np.uint64)
        lanes = BULK_LANES
        steps = -(-n // lanes)
        with np.errstate(over="ignore"):
            idx = np.arange(1, 4 * lanes + 1, dtype=np.uint64)
            z = np.uint64(base) + idx * np.uint64(GOLDEN_GAMMA)
            z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
            z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
            z = z ^ (z >> np.uint64(31))
            s0, s1, s2, s3 = (z[k::4].copy() for k in range(4))
            zero = (s0 | s1 | s2 | s3) == 0
            s0[zero] = 1
            out = np.empty((steps, lanes), dtype=np.uint64)
            five, nine = np.uint64(5), np.uint64(9)
            for step in range(steps):
                x = s1 * five
                out[step] = ((x << np.uint64(7)) | (x >> np.uint64(57))) * nine
                t = s1 << np.uint64(17)
                s2 ^= s0
                s3 ^= s1
                s1 ^= s2
                s0 ^= s3
                s2 ^= t
                s3 = (s3 << np.uint64(45)) | (s3 >> np.uint64(19))
        return out.reshape(-1)[:n]

    def random_array(self, shape, dtype=np.float64) -> np.ndarray:
        n = int(np.prod(shape, dtype=np.int64))
        u = (self.u64_array(n) >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))
        return u.reshape(shape).astype(dtype, copy=False)

    def normal_array(self, shape, dtype=np.float64) -> np.ndarray:
        n = int(np.prod(shape, dtype=np.int64))
        m = (n + 1) // 2
        u = self.random_array((2 * m,))
        u1 = 1.0 - u[:m]
        u2 = u[m:]
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.concatenate([r * np.cos(2.0 * np.pi * u2), r * np.sin(2.0 * np.pi * u2)])
        return z[:n].reshape(shape).astype(dtype, copy=False)
