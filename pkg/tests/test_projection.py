import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from umi import diffcore as dc
from umi.diffcore import DTensor
from umi.projection import (AttentionMap, ModalityEncoder, ModalityProjector, NoModalityError,
                            ProjectedTokens, ProjectionParams, TokenMatrix, UnknownModalityError,
                            attention_map, encode_modality, fuse, fuse_batch, project, reorganize,
                            to_common_space)

SPECS = {0: (12, 32, 20), 1: (1, 8, 6), 2: (5, 16, 10)}  # k_m, d_m, raw size


def make_params(seed=0, k_star=6, d_star=8, dtype=np.float64):
    rng = np.random.default_rng(seed)
    enc = {m: ModalityEncoder(r, k, d, 16, rng, dtype) for m, (k, d, r) in SPECS.items()}
    proj = {m: ModalityProjector(d, k_star, d_star, 8, 1, 2, rng, dtype=dtype) for m, (k, d, r) in SPECS.items()}
    return ProjectionParams(enc, proj)


PARAMS = make_params()


def test_encoder_shape_and_determinism():
    raw = np.random.default_rng(1).normal(size=20)
    a = encode_modality(raw, 0, PARAMS)
    b = encode_modality(raw, 0, PARAMS)
    assert a.tokens.shape == (12, 32)
    np.testing.assert_array_equal(a.tokens.data, b.tokens.data)
    assert np.isfinite(a.tokens.data).all()


def test_encoder_errors():
    with pytest.raises(UnknownModalityError):
        encode_modality(np.zeros(20), 7, PARAMS)
    with pytest.raises(dc.DimensionError):
        encode_modality(np.zeros(19), 0, PARAMS)


@given(st.integers(0, 2 ** 31), st.sampled_from(sorted(SPECS)))
def test_attention_columns_sum_to_one(seed, m):
    rng = np.random.default_rng(seed)
    k, d, _ = SPECS[m]
    F = TokenMatrix(m, DTensor(rng.normal(size=(k, d)) * rng.uniform(0.1, 10)))
    O = attention_map(F, PARAMS).weights.data
    assert O.shape == (k, 6)
    np.testing.assert_allclose(O.sum(axis=0), 1.0, atol=1e-12)
    assert (O >= 0).all() and (O <= 1).all()


def test_single_token_map_is_all_ones():
    F = TokenMatrix(1, DTensor(np.random.default_rng(0).normal(size=(1, 8))))
    np.testing.assert_array_equal(attention_map(F, PARAMS).weights.data, 1.0)


def test_reorganize_examples():
    F = DTensor(np.arange(12.0).reshape(4, 3))
    onehot = np.zeros((4, 5))
    onehot[2] = 1.0
    out = reorganize(TokenMatrix(0, F), AttentionMap(DTensor(onehot)))
    np.testing.assert_array_equal(out.data, np.tile(F.data[2], (5, 1)))
    uni = reorganize(TokenMatrix(0, F), AttentionMap(DTensor(np.full((4, 2), 0.25))))
    np.testing.assert_allclose(uni.data, np.tile(F.data.mean(axis=0), (2, 1)))
    ident = reorganize(TokenMatrix(0, F), AttentionMap(DTensor(np.eye(4))))
    np.testing.assert_array_equal(ident.data, F.data)


def test_reorganize_matches_loop_oracle():
    rng = np.random.default_rng(3)
    F, O = rng.normal(size=(5, 4)), rng.dirichlet(np.ones(5), size=3).T
    got = reorganize(TokenMatrix(0, DTensor(F)), AttentionMap(DTensor(O))).data
    want = np.array([[sum(O[j, i] * F[j, c] for j in range(5)) for c in range(4)] for i in range(3)])
    np.testing.assert_allclose(got, want, atol=1e-12)


def test_reorganize_shape_mismatch():
    with pytest.raises(dc.DimensionError):
        reorganize(TokenMatrix(0, DTensor(np.ones((4, 3)))), AttentionMap(DTensor(np.ones((3, 2)))))


@given(st.integers(0, 2 ** 31))
def test_reorganized_rows_stay_in_convex_hull(seed):
    rng = np.random.default_rng(seed)
    F = TokenMatrix(2, DTensor(rng.normal(size=(5, 16)) * 5))
    out = reorganize(F, attention_map(F, PARAMS)).data
    lo, hi = F.tokens.data.min(axis=0), F.tokens.data.max(axis=0)
    assert (out >= lo - 1e-6).all() and (out <= hi + 1e-6).all()


def test_to_common_space_identity_and_bias():
    rng = np.random.default_rng(0)
    params = ProjectionParams({0: ModalityEncoder(3, 2, 4, 4, rng)},
                              {0: ModalityProjector(4, 3, 4, 4, 1, 1, rng, dtype=np.float64)})
    lin = params.projector(0).common
    lin.weight.data = np.eye(4)
    lin.bias.data = np.zeros(4)
    x = rng.normal(size=(3, 4))
    np.testing.assert_array_equal(to_common_space(DTensor(x), 0, params).tokens.data, x)
    lin.bias.data = np.arange(4.0)
    np.testing.assert_array_equal(to_common_space(DTensor(np.zeros((3, 4))), 0, params).tokens.data,
                                  np.tile(np.arange(4.0), (3, 1)))
    with pytest.raises(dc.DimensionError):
        to_common_space(DTensor(np.zeros((3, 5))), 0, params)


def _projected(seed):
    rng = np.random.default_rng(seed)
    return [ProjectedTokens(m, DTensor(rng.normal(size=(6, 8)).astype(np.float32))) for m in (0, 1, 2)]


def test_fuse_examples():
    parts = _projected(0)
    np.testing.assert_array_equal(fuse(parts[:1]).data, parts[0].tokens.data)
    zero = ProjectedTokens(5, DTensor(np.zeros((6, 8), dtype=np.float32)))
    np.testing.assert_array_equal(fuse([parts[1], zero]).data, parts[1].tokens.data)
    with pytest.raises(NoModalityError):
        fuse([])


@given(st.integers(0, 2 ** 31), st.permutations([0, 1, 2]))
def test_fuse_is_order_invariant(seed, order):
    parts = _projected(seed)
    np.testing.assert_array_equal(fuse([parts[i] for i in order]).data, fuse(parts).data)


def test_fuse_batch_matches_per_sample_fusion():
    rng = np.random.default_rng(2)
    n = 4
    rows = {0: np.array([0, 2, 3]), 1: np.array([1, 2]), 2: np.array([3])}
    toks = {m: rng.normal(size=(len(r), 6, 8)) for m, r in rows.items()}
    fused = fuse_batch({m: (ProjectedTokens(m, DTensor(toks[m])), rows[m]) for m in rows}, n).data
    for i in range(n):
        have = [ProjectedTokens(m, DTensor(toks[m][list(rows[m]).index(i)])) for m in rows if i in rows[m]]
        np.testing.assert_allclose(fused[i], fuse(have).data, atol=1e-12)


def test_projection_end_to_end_gradients():
    params = make_params(seed=4)
    rng = np.random.default_rng(5)
    raws = {m: rng.normal(size=SPECS[m][2]) for m in (0, 2)}
    w = rng.normal(size=(6, 8))

    def f():
        parts = [project(encode_modality(raws[m], m, params), params) for m in raws]
        return dc.sum_(fuse(parts) * w)

    tracked = [p for name, p in params.named_parameters() if not name.startswith(("encoders.1", "projectors.1"))]
    assert dc.grad_check(f, tracked, max_entries=4, rng=rng) < 1e-4
