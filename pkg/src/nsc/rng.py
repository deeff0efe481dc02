"""Named random sub-streams derived from one integer seed."""

import zlib

import numpy as np


def stream(seed: int, *names) -> np.random.Generator:
    """Generator for sub-stream ``names`` of ``seed``; independent of call order."""
    key = [int(seed) & 0xFFFFFFFFFFFFFFFF]
    for name in names:
        key.append(zlib.crc32(str(name).encode("utf-8")) if not isinstance(name, int) else int(name))
    return np.random.default_rng(np.random.SeedSequence(key))
