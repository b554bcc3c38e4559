"""Keyed random streams.

Every consumer of randomness asks for a stream keyed by ``(seed, purpose, ...)``.
Streams are independent Philox generators, so drawing from one never shifts
another (model init does not depend on how many batches were sampled, etc.).
"""

from __future__ import annotations

import zlib

import numpy as np


def _key_int(part: int | str) -> int:
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    if part < 0:
        raise ValueError(f"stream key parts must be nonnegative, got {part}")
    return int(part)


def stream(seed: int, *keys: int | str) -> np.random.Generator:
    """Return a fresh generator for ``(seed, *keys)``; same key, same stream."""
    entropy = [_key_int(seed)] + [_key_int(k) for k in keys]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))
