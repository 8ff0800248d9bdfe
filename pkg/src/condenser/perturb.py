"""Random parameter perturbation with per-filter magnitude matching.

A Gaussian direction is rescaled so every filter of the direction carries
exactly the Frobenius norm of the corresponding parameter filter; the
perturbed weights are then params + alpha * direction.  Matching magnitudes
per filter keeps the effective step size comparable across layers of very
different scale.
"""

from __future__ import annotations

import numpy as np

DEFAULT_EPS = 1e-10


def filter_view(arr: np.ndarray) -> np.ndarray:
    """View as (filters, elements): leading axis for tensors of rank >= 2,
    a single whole-array filter for vectors and scalars."""
    arr = np.asarray(arr)
    if arr.ndim >= 2:
        return arr.reshape(arr.shape[0], -1)
    return arr.reshape(1, -1)


def filter_norms(arr: np.ndarray) -> np.ndarray:
    return np.linalg.norm(filter_view(arr), axis=1)


def filter_normalize(direction: np.ndarray, reference: np.ndarray,
                     eps: float = DEFAULT_EPS) -> np.ndarray:
    """Rescale each filter of ``direction`` to the norm of the matching
    filter of ``reference``."""
    d = np.array(direction, dtype=np.float64, copy=True)
    dv = filter_view(d)
    scale = filter_norms(reference) / (np.linalg.norm(dv, axis=1) + eps)
    dv *= scale[:, None]
    return d


def sample_direction(params: dict, rng) -> dict:
    return {k: rng.standard_normal(v.shape) for k, v in params.items()}


def perturb(params: dict, alpha: float, rng, eps: float = DEFAULT_EPS) -> dict:
    """Fresh parameter dict params + alpha * filter-normalized noise.

    alpha == 0 returns bit-identical copies (no arithmetic is applied), so
    a zero setting degrades exactly to the unperturbed model.
    """
    if alpha == 0.0:
        return {k: v.copy() for k, v in params.items()}
    out = {}
    for k, v in params.items():
        d = filter_normalize(rng.standard_normal(v.shape), v, eps)
        out[k] = v + alpha * d
    return out
