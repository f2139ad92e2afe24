"""Per-modality encoding and projection of token matrices into a shared space.

A modality's tokens ``F`` (``k_m x d_m``) are mixed into ``k*`` output tokens
by a column-softmaxed attention matrix ``O`` (``k_m x k*``), then mapped to
width ``d*`` by a per-modality affine layer.  Projected modalities are fused
by summation.  All functions accept extra leading batch axes.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import diffcore as dc
from .diffcore import DTensor
from .layers import Linear, Module, TransformerStack


class UnknownModalityError(KeyError):
    pass


class NoModalityError(ValueError):
    pass


@dataclass
class TokenMatrix:
    modality: int
    tokens: DTensor  # (..., k_m, d_m)


@dataclass
class AttentionMap:
    weights: DTensor  # (..., k_m, k*)


@dataclass
class ProjectedTokens:
    modality: int
    tokens: DTensor  # (..., k*, d*)


class ModalityEncoder(Module):
    """Linear -> GELU -> Linear to ``k_m * d_m``, reshaped into tokens."""

    def __init__(self, raw_dim: int, k: int, d: int, hidden: int, rng, dtype=np.float32):
        self.raw_dim, self.k, self.d = raw_dim, k, d
        self.fc1 = Linear(raw_dim, hidden, rng, dtype)
        self.fc2 = Linear(hidden, k * d, rng, dtype)

    def flat(self, raw: DTensor) -> DTensor:
        return self.fc2(dc.gelu(self.fc1(raw)))

    def __call__(self, raw: DTensor) -> DTensor:
        lead = raw.shape[:-1]
        return dc.reshape(self.flat(raw), (*lead, self.k, self.d))


class AttentionGenerator(Module):
    """Produces mixing logits ``(k_m, k*)`` from a modality's tokens."""

    def __init__(self, d_in: int, k_out: int, d_hidden: int, layers: int, heads: int, rng,
                 ffn_mult: int = 2, dtype=np.float32):
        self.inp = Linear(d_in, d_hidden, rng, dtype)
        # The logits are normalized over tokens, so anything constant across
        # tokens cancels: no head bias and no shift in the final norm.
        self.stack = TransformerStack(d_hidden, layers, heads, rng, ffn_mult, dtype, final_bias=False)
        self.head = Linear(d_hidden, k_out, rng, dtype, bias=False)

    def __call__(self, tokens: DTensor) -> DTensor:
        return self.head(self.stack(self.inp(tokens)))


class ModalityProjector(Module):
    """Attention generator plus common-space map for one modality."""

    def __init__(self, d_m: int, k_star: int, d_star: int, d_hidden: int, layers: int,
                 heads: int, rng, ffn_mult: int = 2, dtype=np.float32):
        self.d_m = d_m
        self.generator = AttentionGenerator(d_m, k_star, d_hidden, layers, heads, rng, ffn_mult, dtype)
        self.common = Linear(d_m, d_star, rng, dtype)


class ProjectionParams(Module):
    """Encoders and projectors for every declared modality, keyed by id."""

    def __init__(self, encoders: dict[int, ModalityEncoder], projectors: dict[int, ModalityProjector]):
        if set(encoders) != set(projectors):
            raise ValueError("encoders and projectors must cover the same modalities")
        self.encoders = encoders
        self.projectors = projectors

    def encoder(self, m: int) -> ModalityEncoder:
        try:
            return self.encoders[m]
        except KeyError:
            raise UnknownModalityError(f"unknown modality id {m}") from None

    def projector(self, m: int) -> ModalityProjector:
        try:
            return self.projectors[m]
        except KeyError:
            raise UnknownModalityError(f"unknown modality id {m}") from None


def encode_modality(raw, m: int, params: ProjectionParams) -> TokenMatrix:
    enc = params.encoder(m)
    raw = dc.as_tensor(raw)
    if raw.shape[-1] != enc.raw_dim:
        raise dc.DimensionError(f"modality {m} expects raw size {enc.raw_dim}, got {raw.shape}")
    if raw.ndim == 1:
        tokens = enc(dc.reshape(raw, (1, enc.raw_dim)))
        return TokenMatrix(m, dc.reshape(tokens, (enc.k, enc.d)))
    return TokenMatrix(m, enc(raw))


def attention_map(F: TokenMatrix, params: ProjectionParams) -> AttentionMap:
    proj = params.projector(F.modality)
    if F.tokens.shape[-1] != proj.d_m:
        raise dc.DimensionError(f"modality {F.modality} expects width {proj.d_m}, got {F.tokens.shape}")
    logits = proj.generator(F.tokens)
    return AttentionMap(dc.softmax(logits, axis=-2))


def reorganize(F: TokenMatrix, O: AttentionMap) -> DTensor:
    """Row ``i`` of the result is ``sum_j O[j, i] * F[j]``."""
    if O.weights.shape[-2] != F.tokens.shape[-2]:
        raise dc.DimensionError(f"attention map {O.weights.shape} does not match tokens {F.tokens.shape}")
    return dc.matmul(dc.transpose(O.weights), F.tokens)


def to_common_space(F_reorg: DTensor, m: int, params: ProjectionParams) -> ProjectedTokens:
    proj = params.projector(m)
    if F_reorg.shape[-1] != proj.d_m:
        raise dc.DimensionError(f"modality {m} expects width {proj.d_m}, got {F_reorg.shape}")
    return ProjectedTokens(m, proj.common(F_reorg))


def project(F: TokenMatrix, params: ProjectionParams) -> ProjectedTokens:
    return to_common_space(reorganize(F, attention_map(F, params)), F.modality, params)


def fuse(projected: Sequence[ProjectedTokens]) -> DTensor:
    """Sum projected tokens in ascending modality order."""
    if not projected:
        raise NoModalityError("fusion needs at least one modality")
    ordered = sorted(projected, key=lambda p: p.modality)
    shape = ordered[0].tokens.shape
    for p in ordered[1:]:
        if p.tokens.shape != shape:
            raise dc.DimensionError(f"cannot fuse shapes {shape} and {p.tokens.shape}")
    out = ordered[0].tokens
    for p in ordered[1:]:
        out = out + p.tokens
    return out


def fuse_batch(parts: dict[int, tuple[ProjectedTokens, np.ndarray]], n: int) -> DTensor:
    """Fuse a batch where each modality covers only some rows.

    ``parts[m] = (projected, rows)`` holds modality ``m``'s tokens for the
    batch rows ``rows``.  Absent rows contribute an exact zero, so each
    sample's sum equals :func:`fuse` over its own modalities.
    """
    if not parts:
        raise NoModalityError("fusion needs at least one modality")
    out = None
    for m in sorted(parts):
        proj, rows = parts[m]
        term = dc.scatter(proj.tokens, rows, n)
        out = term if out is None else out + term
    return out
