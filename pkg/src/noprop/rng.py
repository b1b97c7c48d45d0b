"""Named, counter-based random streams.

Every stochastic step in training and inference draws from a stream derived
from ``(seed, *keys)``.  Streams are Philox generators, so a stream can be
recreated anywhere (another process, a resumed run) from its name alone.
"""
from __future__ import annotations

import zlib

import numpy as np


def _key_int(key) -> int:
    if isinstance(key, (bool, np.bool_)):
        return int(key)
    if isinstance(key, (int, np.integer)):
        if key < 0:
            raise ValueError("stream keys must be non-negative")
        return int(key)
    return zlib.crc32(str(key).encode("utf-8"))


def stream(seed: int, *keys) -> np.random.Generator:
    """Return the generator for the stream named ``keys`` under ``seed``."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(_key_int(k) for k in keys))
    return np.random.Generator(np.random.Philox(ss))


def normal(gen: np.random.Generator, shape, dtype=np.float64) -> np.ndarray:
    return gen.standard_normal(shape).astype(dtype, copy=False)
