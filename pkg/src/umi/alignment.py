"""Learnable anchor tokens and the feature alignment loss."""
from __future__ import annotations

import numpy as np

from . import diffcore as dc
from .diffcore import DTensor
from .layers import Module, param
from .projection import ProjectedTokens

CLASSIFICATION = "classification"


class LearnableTokens(Module):
    def __init__(self, n_u: int, d: int, rng: np.random.Generator, dtype=np.float32, std: float = 0.02):
        if n_u < 1:
            raise ValueError("need at least one learnable token")
        self.tokens = param(rng.normal(0.0, std, (n_u, d)), dtype)

    @property
    def n_u(self) -> int:
        return self.tokens.shape[0]


def average_feature(projected: ProjectedTokens | DTensor) -> DTensor:
    """Mean over the ``k*`` token rows."""
    t = projected.tokens if isinstance(projected, ProjectedTokens) else projected
    return dc.mean(t, axis=-2)


def assign_token(fbar, task: str, label, U: LearnableTokens) -> np.ndarray:
    """Index of the anchor each feature is pulled toward.

    Classification uses the class id directly.  Other tasks pick the nearest
    token by squared distance; ``argmin`` keeps the lowest index on ties.
    Works on a single ``(d,)`` feature or a batch ``(n, d)``.
    """
    if task == CLASSIFICATION:
        if label is None:
            raise ValueError("classification assignment needs a label")
        lab = np.asarray(label, dtype=np.int64)
        if (lab < 0).any() or (lab >= U.n_u).any():
            raise IndexError(f"label out of range [0, {U.n_u})")
        return lab
    f = fbar.data if isinstance(fbar, DTensor) else np.asarray(fbar)
    u = U.tokens.data
    d2 = ((f[..., None, :].astype(np.float64) - u.astype(np.float64)) ** 2).sum(axis=-1)
    return np.argmin(d2, axis=-1)


def align_loss(features: dict[int, DTensor], assignments: dict[int, np.ndarray],
               U: LearnableTokens) -> DTensor:
    """Sum over modalities (and batch rows) of ``||fbar_m - u_{n_m}||^2``."""
    if set(features) != set(assignments):
        raise ValueError("one assignment per available modality is required")
    total = None
    for m in sorted(features):
        u = dc.take(U.tokens, np.atleast_1d(assignments[m]), axis=0)
        f = features[m]
        if f.ndim == 1:
            u = dc.reshape(u, f.shape)
        term = dc.sum_(dc.square(f - u))
        total = term if total is None else total + term
    if total is None:
        return DTensor(np.zeros((), dtype=U.tokens.dtype))
    return total
