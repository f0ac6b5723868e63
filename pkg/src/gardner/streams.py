"""Seeded random streams.

Every random quantity in the package comes from a numpy ``Generator`` over
PCG64 whose 64-bit seed is ``derive_stream(seed, label, index)``: the first
eight bytes (little endian) of SHA-256 over ``"<seed>|<label>|<index>"``.
Streams are never split sequentially, so results do not depend on the order
in which work is scheduled.
"""

from __future__ import annotations

import hashlib

import numpy as np

RNG_ALGORITHM = "numpy.random.PCG64 seeded by sha256(seed|label|index)[:8] little-endian"

_MASK64 = (1 << 64) - 1


def derive_stream(seed: int, label: str, index: int = 0) -> int:
    if not 0 <= int(seed) <= _MASK64:
        raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed!r}")
    digest = hashlib.sha256(f"{int(seed)}|{label}|{int(index)}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def generator(stream: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(stream))


def stream_rng(seed: int, label: str, index: int = 0) -> np.random.Generator:
    return generator(derive_stream(seed, label, index))
