"""Reproducible random streams.

Every random draw in the package (weight init, dropout masks, shuffling,
synthetic data) comes from a Philox counter-based generator keyed by a seed
and a tuple of stream tags, so streams are independent and results do not
depend on platform or call order across streams.
"""

import zlib

import numpy as np

STREAMS = {"init": 1, "dropout": 2, "shuffle": 3, "data": 4, "attention": 5}


def _tag(t) -> int:
    if isinstance(t, str):
        return STREAMS.get(t, zlib.crc32(t.encode()))
    return int(t)


def make_rng(seed: int, *stream) -> np.random.Generator:
    """Generator for ``seed`` and a stream path such as ``("init",)``."""
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, *(_tag(t) for t in stream)])
    return np.random.Generator(np.random.Philox(ss))
