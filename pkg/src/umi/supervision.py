"""Task losses, pseudo-label bookkeeping and the overall objective."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .diffcore import DTensor

TASKS = ("classification", "regression", "retrieval")
TRIPLET_MARGIN = 0.2


class MissingPretrainingError(RuntimeError):
    """Pseudo-labels were requested before any unimodal predictions were recorded."""


class SelectionError(ValueError):
    pass


@dataclass
class LossWeights:
    lam: float = 1e-3
    alpha: float = 1.0

    def __post_init__(self):
        if not (np.isfinite(self.lam) and np.isfinite(self.alpha)) or self.lam < 0 or self.alpha < 0:
            raise ValueError(f"loss weights must be finite and non-negative: {self}")


@dataclass
class _ModalityBuffer:
    sample_ids: np.ndarray
    ring: np.ndarray  # (n, window, dim)
    epochs: list = field(default_factory=list)
    count: int = 0


class PseudoLabelStore:
    """Rolling window of unimodal predictions per (sample, modality).

    Only the most recent ``window`` epochs are kept.  After
    :func:`finalize_pseudo_labels` the averaged labels live in
    ``self.labels[m]`` (rows aligned with ``self.sample_ids(m)``).
    """

    def __init__(self, window: int, task: str, dim: int):
        if window < 1:
            raise ValueError("window must be >= 1")
        if task not in TASKS:
            raise ValueError(f"unknown task {task!r}")
        self.window, self.task, self.dim = window, task, dim
        self._buf: dict[int, _ModalityBuffer] = {}
        self.labels: dict[int, np.ndarray] = {}

    def register(self, modality: int, sample_ids) -> None:
        ids = np.asarray(sample_ids, dtype=np.int64)
        if len(np.unique(ids)) != len(ids):
            raise ValueError("duplicate sample ids")
        order = np.argsort(ids, kind="stable")
        self._buf[modality] = _ModalityBuffer(ids[order], np.zeros((len(ids), self.window, self.dim)))

    @property
    def modalities(self) -> list[int]:
        return sorted(self._buf)

    def sample_ids(self, modality: int) -> np.ndarray:
        return self._buf[modality].sample_ids

    def depth(self, modality: int) -> int:
        return min(self._buf[modality].count, self.window)

    def epochs(self, modality: int) -> list[int]:
        return list(self._buf[modality].epochs)

    def rows(self, modality: int, sample_ids) -> np.ndarray:
        buf = self._buf[modality]
        ids = np.asarray(sample_ids, dtype=np.int64)
        pos = np.searchsorted(buf.sample_ids, ids)
        pos = np.clip(pos, 0, max(len(buf.sample_ids) - 1, 0))
        if len(buf.sample_ids) == 0 or (buf.sample_ids[pos] != ids).any():
            raise KeyError(f"unknown sample id for modality {modality}")
        return pos

    def history(self, modality: int) -> np.ndarray:
        """Buffered predictions in chronological order, ``(n, depth, dim)``."""
        buf = self._buf[modality]
        depth = self.depth(modality)
        slots = [(buf.count - depth + i) % self.window for i in range(depth)]
        return buf.ring[:, slots]

    def set_selection(self, sample_ids, labels: np.ndarray, modality: np.ndarray) -> None:
        """Record the chosen pseudo-label (and its source modality) per sample."""
        ids = np.asarray(sample_ids, dtype=np.int64)
        order = np.argsort(ids, kind="stable")
        self.selected_ids = ids[order]
        self.selected_labels = np.asarray(labels, dtype=np.float64)[order]
        self.selected_modality = np.asarray(modality, dtype=np.int64)[order]

    def selected(self, sample_ids) -> np.ndarray:
        if not hasattr(self, "selected_ids"):
            raise MissingPretrainingError("pseudo-labels have not been selected")
        ids = np.asarray(sample_ids, dtype=np.int64)
        pos = np.clip(np.searchsorted(self.selected_ids, ids), 0, len(self.selected_ids) - 1)
        if (self.selected_ids[pos] != ids).any():
            raise MissingPretrainingError("no pseudo-label for some training samples")
        return self.selected_labels[pos]

    def label(self, modality: int, sample_ids) -> np.ndarray:
        if modality not in self.labels:
            raise MissingPretrainingError(f"no finalized pseudo-labels for modality {modality}")
        return self.labels[modality][self.rows(modality, sample_ids)]


def record_epoch_predictions(store: PseudoLabelStore, epoch: int, modality: int,
                             sample_ids, predictions) -> None:
    """Push one epoch's predictions for every registered sample of ``modality``."""
    if modality not in store._buf:
        raise KeyError(f"modality {modality} not registered in the store")
    buf = store._buf[modality]
    preds = np.asarray(predictions, dtype=np.float64)
    rows = store.rows(modality, sample_ids)
    if preds.shape != (len(rows), store.dim):
        raise dc.DimensionError(f"predictions {preds.shape} vs ({len(rows)}, {store.dim})")
    if store.task == "classification":
        _check_distribution(preds)
    slot = buf.count % store.window
    ring = buf.ring[:, slot]
    ring[rows] = preds
    buf.ring[:, slot] = ring
    buf.count += 1
    buf.epochs = (buf.epochs + [epoch])[-store.window:]


def finalize_pseudo_labels(store: PseudoLabelStore) -> dict[int, np.ndarray]:
    """Average the buffered predictions; results are also kept on the store."""
    out = {}
    for m in store.modalities:
        if store.depth(m) == 0:
            raise MissingPretrainingError(f"modality {m} has no recorded predictions")
        out[m] = store.history(m).mean(axis=1)
    store.labels = out
    return out


def _check_distribution(p: np.ndarray, tol: float = 1e-6) -> None:
    if (p < 0).any() or not np.allclose(p.sum(axis=-1), 1.0, atol=tol, rtol=0):
        raise ValueError("classification pseudo-labels must be distributions")


def gt_encoding(target, task: str, n_classes: int | None = None) -> np.ndarray:
    """Vector form of a target used for cosine-similarity selection."""
    if task == "classification":
        t = np.asarray(target, dtype=np.int64)
        return np.eye(n_classes)[t]
    return np.asarray(target, dtype=np.float64)


def select_pseudo_label(candidates, gt: np.ndarray) -> int:
    """Index of the candidate with the largest cosine similarity to ``gt``.

    Zero-norm candidates are skipped; ties resolve to the lowest index.
    """
    cand = np.atleast_2d(np.asarray(candidates, dtype=np.float64))
    g = np.asarray(gt, dtype=np.float64)
    norms = np.linalg.norm(cand, axis=1)
    gn = np.linalg.norm(g)
    valid = norms > 0
    if not valid.any() or gn == 0:
        raise SelectionError("no candidate with non-zero norm")
    cos = np.full(len(cand), -np.inf)
    cos[valid] = cand[valid] @ g / (norms[valid] * gn)
    return int(np.argmax(cos))


def select_batch(candidates: np.ndarray, gt: np.ndarray, available: np.ndarray) -> np.ndarray:
    """Vectorized selection.

    ``candidates`` is ``(n, M, dim)``, ``gt`` ``(n, dim)`` and ``available``
    a boolean ``(n, M)`` marking which candidates exist per sample.
    """
    norms = np.linalg.norm(candidates, axis=-1)
    gn = np.linalg.norm(gt, axis=-1, keepdims=True)
    ok = available & (norms > 0)
    if not ok.any(axis=1).all() or (gn == 0).any():
        raise SelectionError("a sample has no usable pseudo-label candidate")
    with np.errstate(invalid="ignore", divide="ignore"):
        cos = np.einsum("nmd,nd->nm", candidates, gt) / (norms * gn)
    cos = np.where(ok, cos, -np.inf)
    return np.argmax(cos, axis=1)


# ----------------------------------------------------------------------------
# losses
# ----------------------------------------------------------------------------

def cross_entropy(logits: DTensor, target) -> DTensor:
    t = np.asarray(target, dtype=np.int64)
    c = logits.shape[-1]
    if (t < 0).any() or (t >= c).any():
        raise IndexError(f"class id out of range [0, {c})")
    onehot = np.eye(c, dtype=logits.dtype)[t]
    return -dc.mean(dc.sum_(dc.log_softmax(logits, -1) * onehot, axis=-1))


def kl_to_prediction(logits: DTensor, pseudo: np.ndarray) -> DTensor:
    """Mean over rows of ``KL(pseudo || softmax(logits))``."""
    p = np.asarray(pseudo, dtype=np.float64)
    _check_distribution(p)
    with np.errstate(divide="ignore", invalid="ignore"):
        ent = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0).sum(axis=-1)
    cross = -dc.sum_(dc.log_softmax(logits, -1) * p.astype(logits.dtype), axis=-1)
    return dc.mean(cross + ent.astype(logits.dtype))


def mse(pred: DTensor, target) -> DTensor:
    t = np.asarray(target, dtype=pred.dtype)
    if t.shape != pred.shape:
        raise dc.DimensionError(f"regression target {t.shape} vs prediction {pred.shape}")
    return dc.mean(dc.square(pred - t))


def pairwise_sq_dist(a: DTensor, b) -> DTensor:
    """``D[i, j] = ||a_i - b_j||^2``."""
    b = dc.as_tensor(b, a)
    aa = dc.sum_(dc.square(a), axis=-1, keepdims=True)
    bb = dc.reshape(dc.sum_(dc.square(b), axis=-1), (1, b.shape[0]))
    return aa + bb - 2.0 * dc.matmul(a, dc.transpose(b))


def triplet(anchor: DTensor, positive, margin: float = TRIPLET_MARGIN) -> DTensor:
    """Hardest-negative margin loss; row ``i`` of ``positive`` pairs with anchor ``i``."""
    n = anchor.shape[0]
    if n < 2:
        return dc.mul(dc.sum_(anchor), 0.0)
    d = pairwise_sq_dist(anchor, positive)
    eye = np.eye(n, dtype=anchor.dtype)
    pos = dc.sum_(d * eye, axis=-1)
    big = float(np.abs(d.data).max()) * 4.0 + 1.0
    neg = dc.amin(d + eye * big, axis=-1)
    return dc.mean(dc.relu(pos - neg + margin))


def supervised_loss(pred: DTensor, target, task: str) -> DTensor:
    if task == "classification":
        return cross_entropy(pred, target)
    if task == "regression":
        return mse(pred, target)
    if task == "retrieval":
        return triplet(pred, np.asarray(target, dtype=pred.dtype))
    raise ValueError(f"unknown task {task!r}")


def pseudo_loss(pred: DTensor, pseudo, task: str) -> DTensor:
    if task == "classification":
        return kl_to_prediction(pred, pseudo)
    if task == "regression":
        return mse(pred, pseudo)
    if task == "retrieval":
        return triplet(pred, np.asarray(pseudo, dtype=pred.dtype))
    raise ValueError(f"unknown task {task!r}")


def total_loss(l_align, l_sup, l_pseudo, w: LossWeights):
    """``lam * align + supervised + alpha * pseudo``."""
    return w.lam * l_align + l_sup + w.alpha * l_pseudo
