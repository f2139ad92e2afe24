"""Finite-difference check of the full training objective."""
from __future__ import annotations

import numpy as np

from ..benchgen import ModalitySpec, default_modalities, stream
from ..diffcore import DTensor, grad_check
from .config import Config
from .models import build_model
from .train import objective

TINY = Config(k_star=4, d_star=8, d_hidden=8, proj_layers=1, pred_layers=1, heads=2, ffn_mult=2,
              enc_hidden=8, lam=1.0, alpha=1.0)


def tiny_modalities() -> list[ModalitySpec]:
    return [ModalitySpec(0, "a", 3, 5, 4), ModalitySpec(1, "b", 4, 6, 4), ModalitySpec(2, "c", 2, 3, 4)]


def _batch(specs, task: str, n: int, out_dim: int, rng):
    """Random frozen tokens with a random per-sample modality mask."""
    ids = [s.id for s in specs]
    avail = rng.random((n, len(ids))) < 0.6
    avail[np.arange(n), rng.integers(0, len(ids), n)] = True
    feats = {}
    for j, s in enumerate(specs):
        rows = np.nonzero(avail[:, j])[0]
        if len(rows):
            feats[s.id] = (DTensor(rng.normal(size=(len(rows), s.k, s.d))), rows)
    labels = rng.integers(0, out_dim, n)
    if task == "classification":
        targets = labels
        pseudo = rng.dirichlet(np.ones(out_dim), n)
    else:
        targets = rng.normal(size=(n, out_dim))
        pseudo = rng.normal(size=(n, out_dim))
    return feats, targets, labels, pseudo


def check_objective(task: str, seed: int = 0, cfg: Config | None = None,
                    specs: list[ModalitySpec] | None = None, n: int = 5, out_dim: int = 3,
                    max_entries: int | None = 6) -> float:
    """Worst relative gradient error of the overall loss over every trainable tensor."""
    cfg = (cfg or TINY).with_(task=task, variant="full", seed=seed)
    specs = specs or tiny_modalities()
    rng = stream(seed, f"gradcheck-{task}")
    model = build_model(specs, cfg, out_dim, out_dim if task == "classification" else None, rng,
                        dtype=np.float64)
    frozen = set(map(id, model.encoder_parameters()))
    params = [p for p in model.parameters() if id(p) not in frozen]
    feats, targets, labels, pseudo = _batch(specs, task, n, out_dim, rng)

    def f():
        return objective(model, cfg, feats, n, task, targets, labels, pseudo)[0]

    return grad_check(f, params, max_entries=max_entries, rng=rng)


def check_default(cfg: Config, seed: int = 0, max_entries: int = 3) -> dict[str, float]:
    """Check at the configured model sizes on small inputs, for every task."""
    specs = [ModalitySpec(s.id, s.name, s.k, s.d, s.raw_dim) for s in default_modalities()]
    return {task: check_objective(task, seed, cfg.with_(lam=1.0, alpha=1.0), specs, n=4, out_dim=4,
                                  max_entries=max_entries)
            for task in ("classification", "regression", "retrieval")}
