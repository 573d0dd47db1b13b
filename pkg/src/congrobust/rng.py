"""Per-purpose random streams derived from one run seed."""

import zlib

import numpy as np


def stream(seed: int, purpose: str, *index: int) -> np.random.Generator:
    """Independent generator for (seed, purpose, index...); stable across runs and platforms."""
    key = [int(seed) & 0xFFFFFFFF, zlib.crc32(purpose.encode()), *(int(i) for i in index)]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(key)))
