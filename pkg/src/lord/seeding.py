"""Deterministic RNG stream derivation.

Every random draw in the package comes from a generator derived here, keyed by
a master seed plus a purpose path (strings are hashed with crc32, which is
stable across processes). Separate streams keep unrelated stages independent:
skipping one stage never shifts the draws of another.
"""

from __future__ import annotations

import zlib

import numpy as np


def derive(seed: int, *parts) -> np.random.Generator:
    """Return a generator for the stream identified by (seed, *parts)."""
    key = tuple(zlib.crc32(p.encode()) if isinstance(p, str) else int(p) for p in parts)
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=key))
