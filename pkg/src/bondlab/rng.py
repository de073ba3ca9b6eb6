"""Counter-based random streams.

Every Monte Carlo path owns a Philox stream keyed by ``(seed, path)``, so a
path's normals never depend on how many other paths were drawn before it or on
which worker drew them.
"""

from __future__ import annotations

import numpy as np

# stream ids; the same (seed, path) pair yields independent draws per stream
MARKET = 0
COUNTEREXAMPLE = 1
CONTROL = 2


def path_rng(seed: int, path: int, stream: int = MARKET) -> np.random.Generator:
    if seed < 0 or path < 0 or stream < 0:
        raise ValueError("seed, path and stream must be non-negative")
    key = np.array([seed, path], dtype=np.uint64)
    counter = np.array([0, 0, 0, stream], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key, counter=counter))


def path_normals(seed: int, start: int, stop: int, shape: tuple[int, ...],
                 stream: int = MARKET) -> np.ndarray:
    """Standard normals of ``shape`` for each path in ``range(start, stop)``.

    The result has shape ``(stop - start, *shape)``; row ``p`` is a pure
    function of ``(seed, start + p, stream)``.
    """
    out = np.empty((stop - start, *shape))
    for row, path in enumerate(range(start, stop)):
        out[row] = path_rng(seed, path, stream).standard_normal(shape)
    return out
