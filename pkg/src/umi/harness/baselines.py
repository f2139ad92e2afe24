"""Reference methods the fusion model is compared against."""
from __future__ import annotations

from typing import Iterable, Sequence

from ..benchgen import SplitData
from .config import Config
from .metrics import Metrics, compute_metrics
from .train import Pretrained, evaluate, late_fusion_predict, predict_unimodal, pretrain_unimodal, train

BASELINES = ("unimodal", "late_fusion", "vanilla_transformer")


def run_baseline(kind: str, train_splits: Sequence[SplitData], cfg: Config, test: SplitData,
                 modalities: Iterable[int], pretrained: Pretrained | None = None) -> Metrics:
    """Train (or reuse) the baseline ``kind`` and score it on ``test``.

    ``unimodal`` needs exactly one modality.  ``late_fusion`` averages the
    unimodal predictions of the requested modalities.
    """
    if kind not in BASELINES:
        raise ValueError(f"unknown baseline {kind!r}; choose from {BASELINES}")
    mods = sorted(set(modalities))
    if not mods:
        raise ValueError("need a non-empty modality set")
    if pretrained is None:
        pretrained = pretrain_unimodal(train_splits, cfg)
    if kind == "unimodal":
        if len(mods) != 1:
            raise ValueError("the unimodal baseline takes exactly one modality")
        pred = predict_unimodal(pretrained.models[mods[0]], test.raw(mods[0]), test.task)
        return compute_metrics(test.task, pred, test.targets)
    if kind == "late_fusion":
        return compute_metrics(test.task, late_fusion_predict(pretrained, test, mods), test.targets)
    model, _ = train(train_splits, cfg.with_(variant="vanilla"), pretrained)
    return evaluate(model, test, mods)
