"""Deterministic RNG substreams derived from a single root seed.

Every random draw in the package comes from a named substream so that any
artifact (codebook, dataset sample, weight init, epoch shuffle) is a pure
function of (root seed, stream path). Disjoint paths never collide.
"""

from __future__ import annotations

import numpy as np

# Stream identifiers; values are part of the reproducibility contract.
CODEBOOK = 1
SAMPLE = 2
INIT = 3
SHUFFLE = 4
VALIDATION = 5
TEST = 6
NOISE = 7

# Sub-stream tags used below INIT for the different module families.
INIT_CE = 1
INIT_DD = 2
INIT_AD = 3
INIT_FCNN_CE = 4
INIT_FCNN_AD = 5


def substream(seed: int, *path: int) -> np.random.Generator:
    """Return a generator for the substream identified by (seed, path)."""
    seed = int(seed)
    if seed < 0:
        raise ValueError("seed must be a non-negative integer")
    ss = np.random.SeedSequence(entropy=seed, spawn_key=tuple(int(p) for p in path))
    return np.random.default_rng(ss)
