"""Grid enumeration over config perturbations."""
from __future__ import annotations

import itertools
import json
from typing import Sequence

from ..benchgen import SplitData
from .config import Config
from .report import metrics_row
from .train import evaluate, pretrain_unimodal, train

# fields that change unimodal pretraining; other fields reuse the cached result
PRETRAIN_FIELDS = ("enc_hidden", "window", "pretrain_epochs", "pretrain_lr", "batch_size", "seed")


def expand_grid(grid: dict[str, Sequence]) -> list[dict]:
    if not grid or any(len(v) == 0 for v in grid.values()):
        raise ValueError("ablation grid must be non-empty")
    names = sorted(grid)
    return [dict(zip(names, combo)) for combo in itertools.product(*(grid[n] for n in names))]


def ablate(grid: dict[str, Sequence], base: Config, seeds: Sequence[int],
           train_splits: Sequence[SplitData], test: SplitData) -> list[dict[str, str]]:
    """One train + evaluate run per grid point and seed, one CSV row each."""
    points = expand_grid(grid)
    mods = list(test.modalities)
    cache = {}
    rows = []
    for point in points:
        for seed in seeds:
            cfg = base.with_(**point, seed=seed)
            key = tuple(getattr(cfg, f) for f in PRETRAIN_FIELDS)
            if key not in cache:
                cache[key] = pretrain_unimodal(train_splits, cfg)
            model, _ = train(train_splits, cfg, cache[key])
            rows.append(metrics_row(cfg.hash(), seed, cfg.variant, mods, evaluate(model, test, mods),
                                    point=json.dumps(point, sort_keys=True)))
    return rows
