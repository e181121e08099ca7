"""Labeled, reproducible RNG sub-streams.

Each consumer (init, episode sampling, dropout, validation, eval) draws
from its own stream derived from (seed, label), so enabling or disabling
one consumer never shifts the draws seen by another.
"""

from __future__ import annotations

import zlib

import numpy as np


def substream(seed: int, label: str) -> np.random.Generator:
    """Generator for `label`, deterministic in (seed, label)."""
    key = zlib.crc32(label.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence(entropy=(int(seed), key)))
