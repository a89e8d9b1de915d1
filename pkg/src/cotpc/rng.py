"""Named random sub-streams.

Every source of randomness in the pipeline (planner, init, sampling,
dropout, ...) derives its generator from one base seed plus a stream name,
so components are independently reproducible and adding a consumer never
perturbs the others.
"""

from __future__ import annotations

import zlib

import numpy as np


def _tag_to_int(tag) -> int:
    if isinstance(tag, (int, np.integer)):
        return int(tag)
    return zlib.crc32(str(tag).encode("utf-8"))


def substream(seed: int, *tags) -> np.random.Generator:
    """Generator for stream (seed, *tags); tags may be ints or names."""
    entropy = [int(seed)] + [_tag_to_int(t) for t in tags]
    return np.random.default_rng(np.random.SeedSequence(entropy))
