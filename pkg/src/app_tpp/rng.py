"""Seeded random streams.

Every stochastic routine draws from numpy's Philox4x64 counter-based generator,
keyed by a SeedSequence built from ``(seed, *keys)``. Deriving one stream per
(sequence, step) keeps results independent of evaluation order and of the
number of worker threads.
"""
from __future__ import annotations

import hashlib

import numpy as np


def stream(seed: int, *keys: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), *map(int, keys)])))


def content_key(categories, inter_arrivals) -> int:
    """Stable 63-bit key for a sequence, so equal sequences get equal streams."""
    h = hashlib.blake2b(digest_size=8)
    h.update(np.ascontiguousarray(categories, dtype="<i8").tobytes())
    h.update(np.ascontiguousarray(inter_arrivals, dtype="<f8").tobytes())
    return int.from_bytes(h.digest(), "little") >> 1
