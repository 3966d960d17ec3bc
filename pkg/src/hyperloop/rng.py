"""Seedable counter-based random streams keyed by name.

Every random draw in the package comes from a Philox-4x64 generator whose
128-bit key is ``(seed, h(name))``: the low 64 bits are the user seed and
the high 64 bits are the first 8 bytes (little-endian) of
``blake2b(name.encode("utf-8"), digest_size=8)``. The counter starts at 0.
Each parameter therefore owns an independent stream that does not depend
on the order in which parameters are created, so two builds with the same
seed agree on every initial value.
"""

from __future__ import annotations

import hashlib

import numpy as np

MASK64 = (1 << 64) - 1


def name_hash(name: str) -> int:
    return int.from_bytes(hashlib.blake2b(name.encode("utf-8"), digest_size=8).digest(), "little")


def stream(seed: int, name: str) -> np.random.Generator:
    """Return the generator for stream ``name`` under ``seed``."""
    key = (int(seed) & MASK64) | (name_hash(name) << 64)
    return np.random.Generator(np.random.Philox(key=key))


def truncated_normal(seed: int, name: str, shape, std: float, bound: float = 2.0) -> np.ndarray:
    """Normal(0, std) samples with every value inside ``bound`` standard deviations.

    Out-of-range draws are replaced by fresh draws from the same stream
    until none remain, so the result is deterministic given (seed, name).
    """
    g = stream(seed, name)
    out = g.standard_normal(shape)
    bad = np.abs(out) > bound
    while bad.any():
        out[bad] = g.standard_normal(int(bad.sum()))
        bad = np.abs(out) > bound
    return out * std
