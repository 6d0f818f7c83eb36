"""Reproducible RNG streams.

Every random object is drawn from its own stream keyed by
``(base_seed, purpose, index)``, so ensemble members can be generated in any
order or in parallel and still come out bit-identical.
"""

from __future__ import annotations

import zlib

import numpy as np


def _tag(purpose: str) -> int:
    return zlib.crc32(purpose.encode("utf-8"))


def seed_sequence(base_seed: int, purpose: str = "", index: int = 0) -> np.random.SeedSequence:
    if base_seed < 0 or index < 0:
        raise ValueError("seeds and indices must be non-negative")
    return np.random.SeedSequence([int(base_seed), _tag(purpose), int(index)])


def rng_for(base_seed: int, purpose: str = "", index: int = 0) -> np.random.Generator:
    """Counter-based generator (Philox) for one ``(seed, purpose, index)`` key."""
    return np.random.Generator(np.random.Philox(seed_sequence(base_seed, purpose, index)))


def derive_seed(base_seed: int, purpose: str, index: int = 0) -> int:
    """A plain integer seed for APIs that take ints rather than generators."""
    return int(seed_sequence(base_seed, purpose, index).generate_state(1, dtype=np.uint32)[0])
