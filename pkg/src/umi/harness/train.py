"""Unimodal pretraining, mixed-batch main training and evaluation."""
from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .. import diffcore as dc
from ..alignment import align_loss, assign_token
from ..benchgen import ModalitySpec, SplitData, stream
from ..diffcore import ComputationRecord, DTensor
from ..dualbranch import softmax_np
from ..supervision import (LossWeights, MissingPretrainingError, PseudoLabelStore,
                           finalize_pseudo_labels, gt_encoding, pseudo_loss,
                           record_epoch_predictions, select_batch, supervised_loss, total_loss)
from .config import Config
from .metrics import Metrics, compute_metrics
from .models import FusionModel, UnimodalModel, build_model, final_prediction
from .optim import Adam

log = logging.getLogger(__name__)

EVAL_CHUNK = 200


@dataclass
class Pretrained:
    models: dict[int, UnimodalModel]
    store: PseudoLabelStore


@dataclass
class RunRecord:
    config: dict
    seed: int
    epoch_losses: list[dict] = field(default_factory=list)
    metrics: dict[str, dict] = field(default_factory=dict)
    wall_clock: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)


# ----------------------------------------------------------------------------
# helpers
# ----------------------------------------------------------------------------

def _specs(data: SplitData) -> list[ModalitySpec]:
    return data.config.modalities


def _batches(n: int, batch_size: int, rng: np.random.Generator) -> Iterable[np.ndarray]:
    perm = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield perm[i:i + batch_size]


def _lr_at(cfg: Config, epoch: int) -> float:
    if cfg.lr_final is not None and epoch >= cfg.epochs - cfg.lr_final_epochs:
        return cfg.lr_final
    return cfg.lr


def encode_tokens(encoder, raw: np.ndarray) -> np.ndarray:
    """Frozen-encoder forward (no record) over a raw array, in chunks."""
    out = [encoder(DTensor(raw[i:i + 512])).data for i in range(0, len(raw), 512)]
    return np.concatenate(out) if out else np.zeros((0, encoder.k, encoder.d), dtype=np.float32)


def model_encoders(model) -> dict:
    if isinstance(model, FusionModel):
        return model.projection.encoders
    return model.encoders


def predict_unimodal(model: UnimodalModel, raw: np.ndarray, task: str) -> np.ndarray:
    out = np.concatenate([model(DTensor(raw[i:i + 512])).data for i in range(0, len(raw), 512)])
    out = out.astype(np.float64)
    return softmax_np(out) if task == "classification" else out


# ----------------------------------------------------------------------------
# unimodal pretraining
# ----------------------------------------------------------------------------

def pretrain_unimodal(train_splits: Sequence[SplitData], cfg: Config) -> Pretrained:
    """Train one encoder + linear head per modality on the splits exposing it,
    recording epoch-end predictions for pseudo-labels."""
    if not train_splits or any(len(s) == 0 for s in train_splits):
        raise ValueError("pretraining needs non-empty training splits")
    task = train_splits[0].task
    bcfg = train_splits[0].config
    out_dim = bcfg.out_dim
    store = PseudoLabelStore(cfg.window, task, out_dim)
    models = {}
    mods = sorted({m for s in train_splits for m in s.modalities})
    for m in mods:
        spec = bcfg.modalities[m]
        parts = [s for s in train_splits if m in s.modalities]
        ids = np.concatenate([s.ids for s in parts])
        raw = np.concatenate([s.raw(m) for s in parts])
        targets = np.concatenate([s.targets for s in parts])
        model = UnimodalModel(spec, cfg, out_dim, stream(cfg.seed, "unimodal-init", m))
        opt = Adam(model.parameters(), lr=cfg.pretrain_lr)
        store.register(m, ids)
        rng = stream(cfg.seed, "unimodal-batches", m)
        for epoch in range(cfg.pretrain_epochs):
            for b in _batches(len(ids), cfg.batch_size, rng):
                if task == "retrieval" and len(b) < 2:
                    continue
                opt.zero_grad()
                with ComputationRecord() as rec:
                    loss = supervised_loss(model(DTensor(raw[b])), targets[b], task)
                rec.backward(loss)
                opt.step()
            record_epoch_predictions(store, epoch, m, ids, predict_unimodal(model, raw, task))
        models[m] = model
        log.info("pretrained modality %d", m)
    finalize_pseudo_labels(store)
    _select(store, train_splits, out_dim)
    return Pretrained(models, store)


def _select(store: PseudoLabelStore, train_splits: Sequence[SplitData], out_dim: int) -> None:
    all_ids, all_labels, all_mod = [], [], []
    for s in train_splits:
        mods = list(s.modalities)
        cand = np.stack([store.label(m, s.ids) for m in mods], axis=1)
        gt = gt_encoding(s.targets, s.task, out_dim)
        pick = select_batch(cand, gt, np.ones(cand.shape[:2], dtype=bool))
        all_ids.append(s.ids)
        all_labels.append(cand[np.arange(len(s)), pick])
        all_mod.append(np.asarray(mods)[pick])
    store.set_selection(np.concatenate(all_ids), np.concatenate(all_labels), np.concatenate(all_mod))


# ----------------------------------------------------------------------------
# main training
# ----------------------------------------------------------------------------

class _Pool:
    """Union of training splits with per-sample modality availability."""

    def __init__(self, splits: Sequence[SplitData], model, frozen: bool):
        self.ids = np.concatenate([s.ids for s in splits])
        self.targets = np.concatenate([s.targets for s in splits])
        self.labels = np.concatenate([s.labels for s in splits])
        self.n = len(self.ids)
        self.frozen = frozen
        self.encoders = model_encoders(model)
        specs = _specs(splits[0])
        self.has, self.source = {}, {}
        offset = 0
        starts = []
        for s in splits:
            starts.append(offset)
            offset += len(s)
        for spec in specs:
            m = spec.id
            has = np.zeros(self.n, dtype=bool)
            src = np.zeros((self.n, spec.raw_dim), dtype=np.float32)
            for s, st in zip(splits, starts):
                if m in s.modalities:
                    has[st:st + len(s)] = True
                    src[st:st + len(s)] = s.raw(m)
            if has.any():
                self.has[m] = has
                self.source[m] = encode_tokens(self.encoders[m], src) if frozen else src

    def features(self, b: np.ndarray):
        feats = {}
        for m in sorted(self.has):
            sel = np.nonzero(self.has[m][b])[0]
            if len(sel) == 0:
                continue
            x = DTensor(self.source[m][b[sel]])
            feats[m] = (x if self.frozen else self.encoders[m](x), sel)
        return feats


def objective(model, cfg: Config, feats, n: int, task: str, targets, labels, pseudo):
    """Overall training loss for one batch, plus its logged components."""
    out = model(feats, n)
    zero = DTensor(np.zeros((), dtype=out.pred_gt.dtype))
    l_align = zero
    if isinstance(model, FusionModel) and out.fbar:
        assigns = {m: assign_token(out.fbar[m], task,
                                   labels[rows] if task == "classification" else None, model.anchors)
                   for m, (_, rows) in feats.items()}
        l_align = dc.mul(align_loss(out.fbar, assigns, model.anchors), 1.0 / n)
    l_sup = supervised_loss(out.pred_gt, targets, task)
    l_ps = zero
    if out.pred_pseudo is not None:
        if cfg.use_pseudo:
            if pseudo is None:
                raise MissingPretrainingError("dual-branch training needs pseudo-labels")
            l_ps = pseudo_loss(out.pred_pseudo, pseudo, task)
            total = total_loss(l_align, l_sup, l_ps, LossWeights(cfg.lam, cfg.alpha))
        else:
            l_ps = supervised_loss(out.pred_pseudo, targets, task)
            total = total_loss(l_align, l_sup, l_ps, LossWeights(cfg.lam, 1.0))
    else:
        total = total_loss(l_align, l_sup, zero, LossWeights(cfg.lam, 0.0))
    parts = {"align": float(l_align.data), "supervised": float(l_sup.data),
             "pseudo": float(l_ps.data), "total": float(total.data)}
    return total, parts


def train(train_splits: Sequence[SplitData], cfg: Config, pretrained: Pretrained | None):
    """Train the configured variant on the mixed union of training splits."""
    t0 = time.perf_counter()
    if not train_splits:
        raise ValueError("no training splits")
    if cfg.variant == "full" and len({tuple(s.modalities) for s in train_splits}) < 2 and len(train_splits) >= 2:
        raise ValueError("training splits must differ in modality sets")
    if pretrained is None:
        raise MissingPretrainingError("pretrained unimodal encoders are required; run pretrain first")
    bcfg = train_splits[0].config
    if cfg.task != bcfg.task:
        raise ValueError(f"config task {cfg.task!r} does not match benchmark task {bcfg.task!r}")
    task = bcfg.task
    model = build_model(bcfg.modalities, cfg, bcfg.out_dim,
                        bcfg.n_classes if task == "classification" else None,
                        stream(cfg.seed, f"init-{cfg.variant}"))
    encoders = model_encoders(model)
    for m, um in pretrained.models.items():
        encoders[m].load_state_dict(um.encoder.state_dict())
    use_pseudo = cfg.variant == "full" and cfg.use_pseudo
    pool = _Pool(train_splits, model, cfg.freeze_encoders)
    pseudo_all = pretrained.store.selected(pool.ids) if use_pseudo else None

    frozen = set(map(id, model.encoder_parameters())) if cfg.freeze_encoders else set()
    params = [p for p in model.parameters() if id(p) not in frozen]
    opt = Adam(params, lr=cfg.lr)
    rng = stream(cfg.seed, "batches")
    record = RunRecord(config=cfg.to_dict(), seed=cfg.seed)
    for epoch in range(cfg.epochs):
        opt.lr = _lr_at(cfg, epoch)
        sums = {"align": 0.0, "supervised": 0.0, "pseudo": 0.0, "total": 0.0}
        count = 0
        for b in _batches(pool.n, cfg.batch_size, rng):
            if task == "retrieval" and len(b) < 2:
                continue
            opt.zero_grad()
            with ComputationRecord() as rec:
                loss, parts = objective(model, cfg, pool.features(b), len(b), task, pool.targets[b],
                                        pool.labels[b], None if pseudo_all is None else pseudo_all[b])
            rec.backward(loss)
            opt.step()
            for k in sums:
                sums[k] += parts[k] * len(b)
            count += len(b)
        record.epoch_losses.append({k: v / count for k, v in sums.items()})
        log.debug("epoch %d %s", epoch, record.epoch_losses[-1])
    record.wall_clock = time.perf_counter() - t0
    return model, record


# ----------------------------------------------------------------------------
# inference and evaluation
# ----------------------------------------------------------------------------

def predict(model, data: SplitData, modalities: Iterable[int]) -> np.ndarray:
    mods = sorted(set(modalities))
    if not mods:
        raise ValueError("need a non-empty modality set")
    encoders = model_encoders(model)
    tokens = {m: encode_tokens(encoders[m], data.raw(m)) for m in mods}
    preds = []
    for i in range(0, len(data), EVAL_CHUNK):
        sl = slice(i, min(i + EVAL_CHUNK, len(data)))
        n = sl.stop - sl.start
        feats = {m: (DTensor(tokens[m][sl]), np.arange(n)) for m in mods}
        preds.append(final_prediction(model(feats, n), data.task))
    return np.concatenate(preds)


def evaluate(model, data: SplitData, modalities: Iterable[int]) -> Metrics:
    return compute_metrics(data.task, predict(model, data, modalities), data.targets)


def late_fusion_predict(pretrained: Pretrained, data: SplitData, modalities: Iterable[int]) -> np.ndarray:
    mods = sorted(set(modalities))
    if not mods:
        raise ValueError("need a non-empty modality set")
    preds = [predict_unimodal(pretrained.models[m], data.raw(m), data.task) for m in mods]
    return np.mean(preds, axis=0)
