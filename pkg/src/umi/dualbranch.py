"""Group-masked fusion transformer producing the two branch predictions."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import DTensor
from .layers import Linear, Module, TransformerStack

GT, PSEUDO = 0, 1


class PartitionError(ValueError):
    pass


@dataclass(frozen=True)
class GroupMask:
    group: np.ndarray  # per-token GT/PSEUDO label

    @property
    def matrix(self) -> np.ndarray:
        g = self.group
        return (g[:, None] == g[None, :]).astype(np.float64)

    @property
    def n_gt(self) -> int:
        return int((self.group == GT).sum())

    @property
    def n_pseudo(self) -> int:
        return int((self.group == PSEUDO).sum())

    def pooling(self) -> np.ndarray:
        """``(2, k*)`` averaging matrix: row 0 pools GT tokens, row 1 PSEUDO."""
        k = len(self.group)
        pool = np.zeros((2, k))
        for b in (GT, PSEUDO):
            sel = self.group == b
            pool[b, sel] = 1.0 / sel.sum()
        return pool

    def swapped(self) -> "GroupMask":
        return GroupMask(1 - self.group)


def partition(k_star: int, ratio: float = 0.5) -> GroupMask:
    """First ``floor(k*(1 - ratio))`` tokens are GT, the rest PSEUDO."""
    if not 0.0 < ratio < 1.0:
        raise PartitionError(f"ratio must lie in (0, 1), got {ratio}")
    if k_star < 2:
        raise PartitionError("need at least two tokens to form two groups")
    n_gt = int(np.floor(k_star * (1.0 - ratio) + 1e-9))
    if n_gt == 0 or n_gt == k_star:
        raise PartitionError(f"k*={k_star}, ratio={ratio} leaves a group empty")
    group = np.full(k_star, PSEUDO, dtype=np.int64)
    group[:n_gt] = GT
    return GroupMask(group)


def single_group(k_star: int) -> GroupMask:
    """All tokens in one group; the mask is all ones."""
    return GroupMask(np.zeros(k_star, dtype=np.int64))


class PredictorParams(Module):
    def __init__(self, d_star: int, layers: int, heads: int, out_dim: int, rng,
                 ffn_mult: int = 2, dtype=np.float32):
        self.stack = TransformerStack(d_star, layers, heads, rng, ffn_mult, dtype)
        self.head = Linear(d_star, out_dim, rng, dtype)


def masked_forward(F: DTensor, mask: GroupMask | None, params: PredictorParams) -> DTensor:
    if mask is not None and len(mask.group) != F.shape[-2]:
        raise dc.DimensionError(f"mask over {len(mask.group)} tokens, input has {F.shape[-2]}")
    m = None if mask is None else mask.matrix
    return params.stack(F, m)


def branch_predictions(hidden: DTensor, mask: GroupMask, params: PredictorParams) -> tuple[DTensor, DTensor]:
    """Mean-pool each group and apply the shared head."""
    if mask.n_gt == 0 or mask.n_pseudo == 0:
        raise PartitionError("both groups must be non-empty")
    pooled = dc.matmul(dc.as_tensor(mask.pooling().astype(hidden.dtype)), hidden)  # (..., 2, d*)
    out = params.head(pooled)
    return dc.take(out, 0, axis=-2), dc.take(out, 1, axis=-2)


def softmax_np(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def infer(pred_gt: np.ndarray, pred_pseudo: np.ndarray, task: str) -> np.ndarray:
    """Average the two branch outputs.

    For classification both inputs must already be post-softmax
    distributions; the average is again a distribution.
    """
    a, b = np.asarray(pred_gt, dtype=np.float64), np.asarray(pred_pseudo, dtype=np.float64)
    if a.shape != b.shape:
        raise dc.DimensionError(f"branch outputs differ in shape: {a.shape} vs {b.shape}")
    if task == "classification":
        for p in (a, b):
            if (p < 0).any() or not np.allclose(p.sum(axis=-1), 1.0, atol=1e-6):
                raise ValueError("classification branch outputs must be distributions")
    return 0.5 * (a + b)
