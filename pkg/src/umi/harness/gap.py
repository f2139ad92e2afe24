"""Distance between modalities in the common feature space."""
from __future__ import annotations

from itertools import combinations

import numpy as np

from ..alignment import average_feature
from ..benchgen import SplitData
from ..diffcore import DTensor
from .models import FusionModel
from .train import EVAL_CHUNK, encode_tokens


def class_gap(features: dict[int, np.ndarray], labels: np.ndarray) -> dict[tuple[int, int], float]:
    """Per modality pair, the mean over classes of the distance between class means.

    ``features[m]`` holds one average feature per sample, rows aligned with
    ``labels``.  Only classes that occur in ``labels`` contribute.
    """
    labels = np.asarray(labels)
    classes = np.unique(labels)
    means = {m: np.stack([f[labels == c].mean(axis=0) for c in classes]).astype(np.float64)
             for m, f in features.items()}
    return {(a, b): float(np.linalg.norm(means[a] - means[b], axis=1).mean())
            for a, b in combinations(sorted(features), 2)}


def average_features(model: FusionModel, data: SplitData) -> dict[int, np.ndarray]:
    enc = model.projection.encoders
    out = {}
    for m in data.modalities:
        tokens = encode_tokens(enc[m], data.raw(m))
        rows = []
        for i in range(0, len(data), EVAL_CHUNK):
            n = min(EVAL_CHUNK, len(data) - i)
            proj = model.project({m: (DTensor(tokens[i:i + n]), np.arange(n))})[m][0]
            rows.append(average_feature(proj).data)
        out[m] = np.concatenate(rows)
    return out


def measure_modality_gap(model, data: SplitData) -> dict[tuple[int, int], float]:
    if data.task != "classification":
        raise ValueError("the modality gap is defined over classes; classification only")
    if not isinstance(model, FusionModel):
        raise TypeError("the modality gap needs a projection model")
    return class_gap(average_features(model, data), data.labels)


def mean_gap(gaps: dict[tuple[int, int], float]) -> float:
    return float(np.mean(list(gaps.values())))
