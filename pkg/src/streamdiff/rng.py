"""Seeded counter-based random streams (numpy's Philox bit generator)."""
from __future__ import annotations

import numpy as np


def make_rng(seed: int, *keys: int) -> np.random.Generator:
    """Generator for ``seed``; extra ``keys`` select independent sub-streams.

    Philox is counter-based, so a (seed, keys) pair always yields the same
    draws regardless of what other streams have consumed.
    """
    if keys:
        ss = np.random.SeedSequence(entropy=int(seed) & (2**64 - 1), spawn_key=tuple(int(k) for k in keys))
    else:
        ss = np.random.SeedSequence(int(seed) & (2**64 - 1))
    return np.random.Generator(np.random.Philox(ss))


def child_seed(rng: np.random.Generator) -> int:
    return int(rng.integers(0, 2**63 - 1))
