"""Model assemblies: unimodal encoders, the projection-fusion model and the
vanilla concatenation transformer baseline."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import diffcore as dc
from ..alignment import LearnableTokens, average_feature
from ..benchgen import ModalitySpec
from ..diffcore import DTensor
from ..dualbranch import (PredictorParams, branch_predictions, masked_forward, partition,
                          softmax_np)
from ..layers import Linear, Module, param
from ..projection import (ModalityEncoder, ModalityProjector, ProjectionParams, TokenMatrix,
                          attention_map, fuse_batch, reorganize, to_common_space)
from .config import Config

# modality id -> (token tensor for the rows that have it, batch row indices)
Features = dict[int, tuple[DTensor, np.ndarray]]


class UnimodalModel(Module):
    """Encoder plus a linear head over the flattened tokens."""

    def __init__(self, spec: ModalitySpec, cfg: Config, out_dim: int, rng, dtype=np.float32):
        self.modality = spec.id
        self.encoder = ModalityEncoder(spec.raw_dim, spec.k, spec.d, cfg.enc_hidden, rng, dtype)
        self.head = Linear(spec.k * spec.d, out_dim, rng, dtype)

    def __call__(self, raw: DTensor) -> DTensor:
        return self.head(self.encoder.flat(raw))


@dataclass
class Output:
    pred_gt: DTensor
    pred_pseudo: DTensor | None
    fbar: dict[int, DTensor]


class FusionModel(Module):
    """Projection into the common space, summation fusion and the predictor.

    With ``dual=True`` the predictor runs group-masked and returns two branch
    predictions; otherwise all tokens are pooled into one prediction.
    """

    def __init__(self, specs: list[ModalitySpec], cfg: Config, out_dim: int, n_classes: int | None,
                 rng, dtype=np.float32, dual: bool = True):
        d_hidden = cfg.d_hidden // 2 if cfg.param_parity else cfg.d_hidden
        encoders = {s.id: ModalityEncoder(s.raw_dim, s.k, s.d, cfg.enc_hidden, rng, dtype) for s in specs}
        projectors = {s.id: ModalityProjector(s.d, cfg.k_star, cfg.d_star, d_hidden, cfg.proj_layers,
                                              cfg.heads, rng, cfg.ffn_mult, dtype) for s in specs}
        self.projection = ProjectionParams(encoders, projectors)
        self.anchors = LearnableTokens(cfg.resolved_n_u(n_classes), cfg.d_star, rng, dtype)
        self.predictor = PredictorParams(cfg.d_star, cfg.pred_layers, cfg.heads, out_dim, rng,
                                         cfg.ffn_mult, dtype)
        self.dual = dual
        self.k_star = cfg.k_star
        self.mask = partition(cfg.k_star, cfg.ratio) if dual else None

    def encoder_parameters(self) -> list[DTensor]:
        return [p for name, p in self.projection.named_parameters() if name.startswith("encoders.")]

    def project(self, feats: Features) -> dict[int, tuple]:
        out = {}
        for m in sorted(feats):
            tokens, rows = feats[m]
            F = TokenMatrix(m, tokens)
            proj = to_common_space(reorganize(F, attention_map(F, self.projection)), m, self.projection)
            out[m] = (proj, rows)
        return out

    def __call__(self, feats: Features, n: int) -> Output:
        parts = self.project(feats)
        fbar = {m: average_feature(p) for m, (p, _) in parts.items()}
        fused = fuse_batch(parts, n)
        hidden = masked_forward(fused, self.mask, self.predictor)
        if self.dual:
            gt, ps = branch_predictions(hidden, self.mask, self.predictor)
            return Output(gt, ps, fbar)
        return Output(self.predictor.head(dc.mean(hidden, axis=-2)), None, fbar)


class VanillaTransformer(Module):
    """Concatenated per-modality tokens through an unmasked transformer.

    Absent modalities are replaced by learnable per-modality placeholder
    tokens, so the input length is always the sum of all ``k_m``.
    """

    def __init__(self, specs: list[ModalitySpec], cfg: Config, out_dim: int, rng, dtype=np.float32):
        self.specs = {s.id: (s.k, s.d) for s in specs}
        self.encoders = {s.id: ModalityEncoder(s.raw_dim, s.k, s.d, cfg.enc_hidden, rng, dtype) for s in specs}
        self.embed = {s.id: Linear(s.d, cfg.d_star, rng, dtype) for s in specs}
        self.type_emb = {s.id: param(rng.normal(0.0, 0.02, (1, cfg.d_star)), dtype) for s in specs}
        self.placeholders = {s.id: param(rng.normal(0.0, 0.02, (s.k, cfg.d_star)), dtype) for s in specs}
        self.predictor = PredictorParams(cfg.d_star, cfg.pred_layers, cfg.heads, out_dim, rng,
                                         cfg.ffn_mult, dtype)

    def encoder_parameters(self) -> list[DTensor]:
        return [p for name, p in self.named_parameters() if name.startswith("encoders.")]

    def input_length(self) -> int:
        return sum(k for k, _ in self.specs.values())

    def __call__(self, feats: Features, n: int) -> Output:
        seq = []
        for m in sorted(self.specs):
            absent = np.ones((n, 1, 1))
            present = None
            if m in feats:
                tokens, rows = feats[m]
                absent[rows] = 0.0
                x = self.embed[m](tokens) + self.type_emb[m]
                present = dc.scatter(x, rows, n)
            filler = dc.mul(self.placeholders[m], absent.astype(self.placeholders[m].dtype))
            seq.append(filler if present is None else present + filler)
        hidden = self.predictor.stack(dc.concat(seq, axis=-2))
        return Output(self.predictor.head(dc.mean(hidden, axis=-2)), None, {})


def build_model(specs: list[ModalitySpec], cfg: Config, out_dim: int, n_classes: int | None, rng,
                dtype=np.float32):
    if cfg.variant == "vanilla":
        return VanillaTransformer(specs, cfg, out_dim, rng, dtype)
    return FusionModel(specs, cfg, out_dim, n_classes, rng, dtype, dual=cfg.variant == "full")


def final_prediction(out: Output, task: str) -> np.ndarray:
    """Inference-time prediction; classification returns probabilities."""
    from ..dualbranch import infer
    gt = out.pred_gt.data.astype(np.float64)
    if out.pred_pseudo is None:
        return softmax_np(gt) if task == "classification" else gt
    ps = out.pred_pseudo.data.astype(np.float64)
    if task == "classification":
        return infer(softmax_np(gt), softmax_np(ps), task)
    return infer(gt, ps, task)
