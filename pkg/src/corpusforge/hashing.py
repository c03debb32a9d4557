"""Stable 64-bit hashing primitives shared by featurization and shingling.

Python's builtin ``hash()`` is salted per process, so everything that must
reproduce across runs and machines goes through blake2b instead.
"""

from __future__ import annotations

import hashlib
import struct

import numpy as np

# Modulus of the universal hash family: the Mersenne prime 2^61 - 1.
MERSENNE_61 = (1 << 61) - 1

_P = np.uint64(MERSENNE_61)
_LOW30 = np.uint64((1 << 30) - 1)
_LOW31 = np.uint64((1 << 31) - 1)


def stable_hash64(data: str | bytes, seed: int = 0) -> int:
    """Deterministic 64-bit hash of a string or byte sequence."""
    if isinstance(data, str):
        data = data.encode("utf-8")
    key = struct.pack("<q", seed)
    return int.from_bytes(hashlib.blake2b(data, digest_size=8, key=key).digest(), "little")


class UniversalHashFamily:
    """Seeded family of k hash functions h_i(x) = (a_i * x + b_i) mod (2^61 - 1).

    Multipliers are drawn below 2^31 so every intermediate product fits in a
    uint64 and the modular arithmetic is exact under numpy (no wraparound).
    """

    def __init__(self, k: int, seed: int):
        if k < 1:
            raise ValueError(f"need at least one hash function, got k={k}")
        rng = np.random.default_rng(seed)
        self.k = k
        self.seed = seed
        self.a = rng.integers(1, 1 << 31, size=k, dtype=np.uint64)
        self.b = rng.integers(0, MERSENNE_61, size=k, dtype=np.uint64)

    def apply(self, values: np.ndarray) -> np.ndarray:
        """Hash each of m input values with all k functions.

        Returns an (m, k) uint64 array; every entry is < 2^61 - 1.
        """
        x = np.asarray(values, dtype=np.uint64) % _P
        xh = (x >> np.uint64(31))[:, None]  # < 2^30
        xl = (x & _LOW31)[:, None]  # < 2^31
        a = self.a[None, :]
        # a*x = a*xh*2^31 + a*xl, reduced mod p term by term. 2^61 = 1 (mod p),
        # so t*2^31 = (t >> 30) + ((t & low30) << 31) (mod p).
        t = (a * xh) % _P
        high = ((t >> np.uint64(30)) + ((t & _LOW30) << np.uint64(31))) % _P
        low = (a * xl) % _P
        return (high + low + self.b[None, :]) % _P

    def min_over(self, values: np.ndarray, block: int = 1 << 22) -> np.ndarray:
        """Componentwise minimum of ``apply`` over all values, blockwise.

        Blocking keeps the (m, k) intermediate bounded for large inputs.
        """
        values = np.asarray(values, dtype=np.uint64)
        if values.size == 0:
            raise ValueError("cannot take hash minima of an empty value set")
        rows = max(1, block // self.k)
        minima = np.full(self.k, np.iinfo(np.uint64).max, dtype=np.uint64)
        for start in range(0, values.size, rows):
            chunk = self.apply(values[start : start + rows])
            np.minimum(minima, chunk.min(axis=0), out=minima)
        return minima


def config_hash(payload) -> str:
    """Canonical sha256 hex digest of a JSON-serializable configuration tree."""
    import json

    canon = json.dumps(payload, sort_keys=True, separators=(",", ":"), ensure_ascii=False)
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()
