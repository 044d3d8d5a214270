"""Named RNG substreams so paired experiments share common random numbers."""

import zlib

import numpy as np


def substream(seed: int, *keys) -> np.random.Generator:
    """Generator derived from (seed, keys); stable across runs and platforms."""
    ints = []
    for k in keys:
        if isinstance(k, str):
            ints.append(zlib.crc32(k.encode()))
        else:
            ints.append(int(k) & 0xFFFFFFFF)
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=tuple(ints)))
