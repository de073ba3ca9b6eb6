"""Fan path chunks out to a process pool.

Chunk boundaries are fixed by ``CHUNK`` and never by the worker count, so
numerical results are bit-identical for any number of workers.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from functools import partial
from typing import Callable

import numpy as np

CHUNK = 250


def chunk_bounds(n_paths: int, chunk: int = CHUNK) -> list[tuple[int, int]]:
    return [(lo, min(lo + chunk, n_paths)) for lo in range(0, n_paths, chunk)]


def map_paths(func: Callable, n_paths: int, workers: int = 1, chunk: int = CHUNK, **kwargs) -> dict:
    """Run ``func(start, stop, **kwargs)`` over path chunks and concatenate.

    ``func`` must be a module-level function returning a dict of arrays whose
    first axis indexes paths.
    """
    bounds = chunk_bounds(n_paths, chunk)
    job = partial(_call, func, kwargs)
    if workers > 1 and len(bounds) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(job, bounds))
    else:
        parts = [job(b) for b in bounds]
    return {key: np.concatenate([p[key] for p in parts]) for key in parts[0]}


def _call(func, kwargs, bounds):
    return func(bounds[0], bounds[1], **kwargs)
