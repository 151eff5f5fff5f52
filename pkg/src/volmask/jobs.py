"""Independent jobs: per-job random streams derived from one master seed, and a worker pool.

A job is identified by ``(seed, kind, *index)``; the kind string is hashed so
that adding jobs of one kind never shifts the streams of another.
"""

from __future__ import annotations

import zlib
from concurrent.futures import ProcessPoolExecutor

import numpy as np


def job_seed_sequence(seed: int, kind: str, *index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed), zlib.crc32(kind.encode()), *map(int, index)])


def job_rng(seed: int, kind: str, *index: int) -> np.random.Generator:
    return np.random.default_rng(job_seed_sequence(seed, kind, *index))


def parallel_map(fn, jobs: int, arglists) -> list:
    """``[fn(*args) for args in arglists]``, on up to ``jobs`` processes; order is preserved."""
    arglists = list(arglists)
    if jobs <= 1 or len(arglists) <= 1:
        return [fn(*a) for a in arglists]
    with ProcessPoolExecutor(max_workers=min(jobs, len(arglists))) as pool:
        return list(pool.map(fn, *zip(*arglists)))
