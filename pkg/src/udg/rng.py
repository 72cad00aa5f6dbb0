"""Counter-based random numbers.

Every draw is a pure function of ``(seed, counter)``. The generator is the
splitmix64 finalizer applied to ``seed + index * 0x9E3779B97F4A7C15`` (all
arithmetic modulo 2**64), where ``index`` runs over ``counter + 1,
counter + 2, ...``. Derived quantities:

* uniform: ``((x >> 11) + 0.5) * 2**-53``, so values lie strictly in (0, 1)
* normal: Box-Muller on two consecutive uniforms, ``sqrt(-2 ln u1) * cos(2 pi u2)``
* permutation: stable argsort of ``n`` uniforms

Child streams come from :meth:`Rng.fork`, which hashes its keys with BLAKE2b so
that the same key path gives the same stream on every platform.
"""

from __future__ import annotations

import hashlib

import numpy as np

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15


def _mix_int(z: int) -> int:
    z &= MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def _mix_array(z: np.ndarray) -> np.ndarray:
    z = z ^ (z >> np.uint64(30))
    z = z * np.uint64(0xBF58476D1CE4E5B9)
    z = z ^ (z >> np.uint64(27))
    z = z * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


def _key_to_int(key: int | str) -> int:
    if isinstance(key, (int, np.integer)):
        return int(key) & MASK64
    digest = hashlib.blake2b(str(key).encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


class Rng:
    """Splitmix64 stream positioned at ``counter``."""

    __slots__ = ("seed", "counter")

    def __init__(self, seed: int, counter: int = 0):
        if seed < 0 or counter < 0:
            raise ValueError("seed and counter must be non-negative")
        self.seed = int(seed) & MASK64
        self.counter = int(counter) & MASK64

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, counter={self.counter})"

    def state(self) -> tuple[int, int]:
        return self.seed, self.counter

    def fork(self, *keys: int | str) -> "Rng":
        """Independent child stream addressed by ``keys`` (counter reset to 0)."""
        s = self.seed
        for key in keys:
            s = _mix_int(s ^ _mix_int(_key_to_int(key) + GOLDEN))
        return Rng(s)

    def bits(self, n: int) -> np.ndarray:
        idx = np.arange(1, n + 1, dtype=np.uint64) + np.uint64(self.counter)
        self.counter = (self.counter + n) & MASK64
        with np.errstate(over="ignore"):
            return _mix_array(np.uint64(self.seed) + idx * np.uint64(GOLDEN))

    def uniform(self, shape=()) -> np.ndarray:
        n = int(np.prod(shape, dtype=np.int64))
        x = self.bits(n) >> np.uint64(11)
        u = (x.astype(np.float64) + 0.5) * (2.0**-53)
        return u.reshape(shape)

    def normal(self, shape=()) -> np.ndarray:
        n = int(np.prod(shape, dtype=np.int64))
        u = self.uniform((2, n))
        z = np.sqrt(-2.0 * np.log(u[0])) * np.cos(2.0 * np.pi * u[1])
        return z.reshape(shape)

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.uniform(n), kind="stable")

    def integers(self, low: int, high: int, shape=()) -> np.ndarray:
        if high <= low:
            raise ValueError("empty integer range")
        u = self.uniform(shape)
        return (low + np.floor(u * (high - low))).astype(np.int64)
