"""Counter-based random number streams for reproducible parallel Monte Carlo.

Every Gaussian increment is a pure function of (seed, path_id, step, component),
so any subset of paths can be generated on any worker, in any order, and the
values never change.  The generator is a stateless splitmix64-style avalanche
applied to a 64-bit counter; uniforms are mapped to normals by inverse CDF,
which is bit-stable across platforms for a given scipy build.
"""

from __future__ import annotations

import numpy as np
from scipy.special import ndtri

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


def _mix64(z: np.ndarray) -> np.ndarray:
    """splitmix64 finalizer: full-avalanche 64-bit mixer."""
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


def _stream_words(seed: int, path_ids: np.ndarray, n_words: int) -> np.ndarray:
    """Raw uint64 words, shape (len(path_ids), n_words).

    Word j of path p is mix(mix(seed + GOLDEN*(p+1)) + GOLDEN*(j+1)): a
    splitmix64 sequence whose start state is itself derived by mixing the
    (seed, path) key, so distinct paths use well-separated states.
    """
    with np.errstate(over="ignore"):
        seed64 = np.uint64(seed & 0xFFFFFFFFFFFFFFFF)
        keys = _mix64(seed64 + _GOLDEN * (path_ids.astype(np.uint64) + np.uint64(1)))
        idx = _GOLDEN * (np.arange(1, n_words + 1, dtype=np.uint64))
        return _mix64(keys[:, None] + idx[None, :])


def uniforms(seed: int, path_ids: np.ndarray, n: int) -> np.ndarray:
    """Per-path uniforms in the open interval (0, 1), shape (paths, n)."""
    w = _stream_words(seed, np.asarray(path_ids, dtype=np.uint64), n)
    # 53 significant bits, offset by half an ulp so 0 and 1 are excluded
    return ((w >> np.uint64(11)).astype(np.float64) + 0.5) * (2.0 ** -53)


def gaussian_increments(
    seed: int, path_lo: int, path_hi: int, steps: int, dim: int, dt: float
) -> np.ndarray:
    """Brownian increments dW ~ N(0, dt*I) for paths [path_lo, path_hi).

    Returns shape (path_hi - path_lo, steps, dim).  Row i is identical to the
    single-path draw for path_id = path_lo + i regardless of the block bounds.
    """
    if path_hi < path_lo:
        raise ValueError("empty or inverted path range")
    ids = np.arange(path_lo, path_hi, dtype=np.uint64)
    u = uniforms(seed, ids, steps * dim)
    z = ndtri(u).reshape(len(ids), steps, dim)
    return z * np.sqrt(dt)
