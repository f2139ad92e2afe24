"""Evaluation metrics: top-1, MAE and retrieval ranks."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

RECALL_KS = (1, 5, 10)


@dataclass
class Metrics:
    task: str
    n: int
    top1: float | None = None
    mae: float | None = None
    retrieval: dict[str, dict[str, float]] = field(default_factory=dict)

    @property
    def primary(self) -> float:
        """Headline number: top-1 (%), MAE, or mean rank averaged over directions."""
        if self.task == "classification":
            return self.top1
        if self.task == "regression":
            return self.mae
        return 0.5 * (self.retrieval["v2t"]["mnr"] + self.retrieval["t2v"]["mnr"])

    def flat(self) -> dict[str, float]:
        out = {}
        if self.top1 is not None:
            out["top1"] = self.top1
        if self.mae is not None:
            out["mae"] = self.mae
        for direction, vals in self.retrieval.items():
            for k, v in vals.items():
                out[f"{direction}_{k}"] = v
        return out

    def to_dict(self) -> dict:
        return asdict(self)


def top1(probs: np.ndarray, labels: np.ndarray) -> float:
    return 100.0 * float(np.mean(np.argmax(probs, axis=-1) == np.asarray(labels)))


def mae(pred: np.ndarray, target: np.ndarray) -> float:
    return float(np.mean(np.abs(np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64))))


def sq_distances(queries: np.ndarray, gallery: np.ndarray) -> np.ndarray:
    q = np.asarray(queries, dtype=np.float64)
    g = np.asarray(gallery, dtype=np.float64)
    return ((q[:, None, :] - g[None, :, :]) ** 2).sum(axis=-1)


def ranks_from_distances(dist: np.ndarray) -> np.ndarray:
    """1-based rank of item ``i`` in row ``i``; ties go to the lower index."""
    n = dist.shape[0]
    own = dist[np.arange(n), np.arange(n)][:, None]
    idx = np.arange(dist.shape[1])[None, :]
    ahead = (dist < own) | ((dist == own) & (idx < np.arange(n)[:, None]))
    return 1 + ahead.sum(axis=1)


def rank_summary(ranks: np.ndarray) -> dict[str, float]:
    ranks = np.asarray(ranks)
    out = {f"r{k}": 100.0 * float(np.mean(ranks <= k)) for k in RECALL_KS}
    out["medr"] = float(np.median(ranks))
    out["mnr"] = float(np.mean(ranks))
    return out


def retrieval_metrics(video: np.ndarray, text: np.ndarray) -> dict[str, dict[str, float]]:
    """Both directions over a gallery where row ``i`` of each side is a pair."""
    d = sq_distances(video, text)
    return {"v2t": rank_summary(ranks_from_distances(d)), "t2v": rank_summary(ranks_from_distances(d.T))}


def compute_metrics(task: str, pred: np.ndarray, target: np.ndarray) -> Metrics:
    n = len(pred)
    if task == "classification":
        return Metrics(task, n, top1=top1(pred, target))
    if task == "regression":
        return Metrics(task, n, mae=mae(pred, target))
    return Metrics(task, n, retrieval=retrieval_metrics(pred, target))
