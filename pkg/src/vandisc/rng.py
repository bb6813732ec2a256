"""Counter-based random streams, splittable by (seed, path index).

Each simulated path owns an independent Philox stream keyed by the pair
(seed, path index), so path batches are bitwise reproducible regardless of
batching or evaluation order, and distinct seeds give independent draws.
Within a path, the step index addresses positions along the stream.

Increments are antithetic by default: path 2i+1 replays the negated draws
of path 2i.  This halves variance for smooth functionals and, more
importantly, makes empirical step means vanish exactly, which downstream
regression estimators exploit to return exact zeros for degenerate
conditional expectations.
"""

from __future__ import annotations

import numpy as np

__all__ = ["path_normals", "batch_normals", "substream"]


def _philox(seed: int, path: int) -> np.random.Generator:
    key = np.array([np.uint64(seed & 0xFFFFFFFFFFFFFFFF), np.uint64(path)], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def substream(seed: int, path: int) -> np.random.Generator:
    """Generator for the (seed, path) substream; deterministic and isolated."""
    return _philox(seed, path)


def path_normals(seed: int, path: int, n_steps: int, d: int) -> np.ndarray:
    """Standard normal draws for one path, shape (n_steps, d)."""
    return _philox(seed, path).standard_normal((n_steps, d))


def batch_normals(seed: int, n_paths: int, n_steps: int, d: int,
                  antithetic: bool = True) -> np.ndarray:
    """Standard normal draws for a path batch, shape (n_paths, n_steps, d).

    With ``antithetic`` (default) odd paths negate their even partner, so
    every step's cross-path sum is exactly zero when n_paths is even.
    """
    out = np.empty((n_paths, n_steps, d))
    if antithetic:
        for pair in range((n_paths + 1) // 2):
            draw = path_normals(seed, pair, n_steps, d)
            out[2 * pair] = draw
            if 2 * pair + 1 < n_paths:
                out[2 * pair + 1] = -draw
    else:
        for path in range(n_paths):
            out[path] = path_normals(seed, path, n_steps, d)
    return out
