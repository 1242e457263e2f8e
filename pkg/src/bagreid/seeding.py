"""Derived random streams.

All randomness in the pipeline flows from one root seed. Each module draws
from a named substream so that adding or reordering consumers never shifts
another module's draws, and so per-item streams can be evaluated in parallel
without changing results.
"""

from __future__ import annotations

import zlib

import numpy as np


def stream_key(*tags: int | str) -> list[int]:
    """Map a tag tuple to a stable integer key list for SeedSequence."""
    key = []
    for tag in tags:
        if isinstance(tag, str):
            key.append(zlib.crc32(tag.encode("utf-8")))
        else:
            key.append(int(tag) & 0xFFFFFFFF)
    return key


def derive_rng(seed: int, *tags: int | str) -> np.random.Generator:
    """Generator for the substream named by ``tags`` under ``seed``."""
    return np.random.default_rng(np.random.SeedSequence(stream_key(seed, *tags)))
