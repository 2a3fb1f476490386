"""Random-stream derivation.

One root seed drives everything. Per-replica streams come from
``SeedSequence(root_seed, spawn_key=(index,))`` feeding a PCG64 bit
generator; nested substreams (e.g. one per renormalization block) extend
the spawn key. Spawn keys are part of the reproducibility contract:
identical (root seed, key path) always yields the identical stream, and
distinct key paths give statistically independent streams.

Simulation loops draw exclusively via ``Generator.random()`` so the
Python reference engine and the numba kernels consume bit-identical
sequences (numba reproduces NumPy's Generator output exactly).

Percolation edge variables use a counter scheme instead of a stream:
``edge_uniform`` hashes (seed, replica, level, column, direction) with
splitmix64, so an edge's uniform does not depend on the order in which
edges are examined. That is what makes the shared-uniform monotone
coupling across p-values exact.
"""

from __future__ import annotations

import numpy as np
from numba import njit


def replica_stream(root_seed: int, index: int) -> np.random.Generator:
    """Independent stream for replica ``index`` under ``root_seed``."""
    return np.random.Generator(
        np.random.PCG64(np.random.SeedSequence(root_seed, spawn_key=(index,)))
    )


def substream(root_seed: int, *path: int) -> np.random.Generator:
    """Stream for a nested derivation path, e.g. (replica, attempt, level, col)."""
    return np.random.Generator(
        np.random.PCG64(np.random.SeedSequence(root_seed, spawn_key=tuple(path)))
    )


@njit(cache=True, inline="always")
def _splitmix64(x):
    x = (x + np.uint64(0x9E3779B97F4A7C15)) & np.uint64(0xFFFFFFFFFFFFFFFF)
    z = x
    z = ((z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)) & np.uint64(
        0xFFFFFFFFFFFFFFFF
    )
    z = ((z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)) & np.uint64(
        0xFFFFFFFFFFFFFFFF
    )
    return z ^ (z >> np.uint64(31))


@njit(cache=True)
def edge_uniform(seed, replica, level, col, direction):
    """Uniform in [0,1) attached to one oriented bond, order-independent.

    ``direction`` is 0 for the (+1,+1) bond and 1 for the (-1,+1) bond.
    """
    h = _splitmix64(np.uint64(seed) ^ np.uint64(0xD1B54A32D192ED03))
    h = _splitmix64(h ^ np.uint64(replica))
    h = _splitmix64(h ^ np.uint64(level))
    # signed column folded into uint64 via two's complement
    h = _splitmix64(h ^ np.uint64(np.int64(col)))
    h = _splitmix64(h ^ np.uint64(direction))
    return (h >> np.uint64(11)) * (1.0 / 9007199254740992.0)
