"""Seed derivation.

Every random stream is a numpy ``Generator`` over ``PCG64``.  Child seeds are
derived by hashing ``(parent seed, purpose tag, indices)`` with BLAKE2b and
taking the first 8 bytes little-endian, so a stream never depends on how many
draws another stream made.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(parent: int, tag: str, *indices: int) -> int:
    key = ":".join([str(int(parent)), tag, *(str(int(i)) for i in indices)])
    digest = hashlib.blake2b(key.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def make_rng(parent: int, tag: str, *indices: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(derive_seed(parent, tag, *indices)))


def checksum(*arrays: np.ndarray) -> str:
    """SHA-256 over the raw little-endian float64 bytes of ``arrays``."""
    h = hashlib.sha256()
    for a in arrays:
        a = np.ascontiguousarray(a, dtype="<f8")
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()
