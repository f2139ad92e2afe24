import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from umi import diffcore as dc
from umi.diffcore import DTensor
from umi.dualbranch import (GT, PSEUDO, GroupMask, PartitionError, PredictorParams, branch_predictions,
                            infer, masked_forward, partition, single_group, softmax_np)


@pytest.mark.parametrize("k, ratio, n_gt", [(512, 0.5, 256), (16, 0.5, 8), (10, 0.3, 7), (8, 0.5, 4)])
def test_partition_sizes(k, ratio, n_gt):
    mask = partition(k, ratio)
    assert (mask.n_gt, mask.n_pseudo) == (n_gt, k - n_gt)
    assert (mask.group[:n_gt] == GT).all() and (mask.group[n_gt:] == PSEUDO).all()


@pytest.mark.parametrize("k, ratio", [(1, 0.5), (4, 0.0), (4, 1.0), (4, 0.9), (3, 0.95)])
def test_partition_rejects_empty_groups(k, ratio):
    with pytest.raises(PartitionError):
        partition(k, ratio)


def test_mask_matrix_is_block_diagonal():
    m = partition(6, 0.5).matrix
    want = np.zeros((6, 6))
    want[:3, :3] = want[3:, 3:] = 1
    np.testing.assert_array_equal(m, want)


def _params(seed=0, d=8, out=3, dtype=np.float64):
    return PredictorParams(d, 2, 2, out, np.random.default_rng(seed), dtype=dtype)


def test_single_group_equals_unmasked():
    p = _params()
    x = DTensor(np.random.default_rng(1).normal(size=(2, 6, 8)))
    np.testing.assert_array_equal(masked_forward(x, single_group(6), p).data, masked_forward(x, None, p).data)


@given(st.integers(0, 2 ** 31))
def test_gt_rows_ignore_pseudo_inputs_exactly(seed):
    rng = np.random.default_rng(seed)
    p, mask = _params(seed % 7), partition(6, 0.5)
    x = rng.normal(size=(6, 8))
    y = x.copy()
    y[3:] = rng.normal(size=(3, 8)) * 100
    a = masked_forward(DTensor(x), mask, p).data
    b = masked_forward(DTensor(y), mask, p).data
    np.testing.assert_array_equal(a[:3], b[:3])


def test_masked_pass_equals_separate_group_passes():
    p, mask = _params(3, dtype=np.float32), partition(8, 0.25)
    x = np.random.default_rng(2).normal(size=(8, 8)).astype(np.float32)
    full = masked_forward(DTensor(x), mask, p).data
    gt = masked_forward(DTensor(x[:6]), None, p).data
    ps = masked_forward(DTensor(x[6:]), None, p).data
    np.testing.assert_allclose(full, np.concatenate([gt, ps]), atol=1e-5)


def test_branch_predictions_on_constant_rows():
    p = _params()
    v = np.random.default_rng(0).normal(size=8)
    hidden = DTensor(np.tile(v, (6, 1)))
    gt, ps = branch_predictions(hidden, partition(6, 0.5), p)
    head = p.head(DTensor(v[None])).data[0]
    np.testing.assert_allclose(gt.data, head, atol=1e-12)
    np.testing.assert_allclose(ps.data, head, atol=1e-12)
    assert gt.shape == (3,)


def test_swapping_groups_swaps_outputs():
    p = _params()
    hidden = DTensor(np.random.default_rng(4).normal(size=(2, 6, 8)))
    mask = partition(6, 0.5)
    gt, ps = branch_predictions(hidden, mask, p)
    gt2, ps2 = branch_predictions(hidden, mask.swapped(), p)
    np.testing.assert_array_equal(gt.data, ps2.data)
    np.testing.assert_array_equal(ps.data, gt2.data)


def test_masked_attention_rows():
    # the per-group attention rows are distributions with zero cross-group weight
    rng = np.random.default_rng(0)
    q, k = rng.normal(size=(6, 4)), rng.normal(size=(6, 4))
    mask = partition(6, 0.5).matrix
    out = dc.attention(DTensor(q), DTensor(k), DTensor(np.eye(6)), mask).data
    np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-12)
    assert (out[:3, 3:] == 0).all() and (out[3:, :3] == 0).all()


def test_infer_examples():
    np.testing.assert_array_equal(infer(np.array([1.0, 0.0]), np.array([0.0, 1.0]), "classification"), [0.5, 0.5])
    np.testing.assert_array_equal(infer(np.array([2.0]), np.array([4.0]), "regression"), [3.0])
    p = np.array([0.2, 0.8])
    np.testing.assert_array_equal(infer(p, p, "classification"), p)
    with pytest.raises(ValueError):
        infer(np.array([2.0, -1.0]), p, "classification")


@given(st.integers(0, 2 ** 31))
def test_infer_returns_distribution(seed):
    rng = np.random.default_rng(seed)
    a, b = softmax_np(rng.normal(size=(5, 4)) * 5), softmax_np(rng.normal(size=(5, 4)))
    out = infer(a, b, "classification")
    assert (out >= 0).all()
    np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-6)


def test_mask_length_mismatch():
    with pytest.raises(dc.DimensionError):
        masked_forward(DTensor(np.zeros((5, 8))), partition(6), _params())


def test_group_mask_pooling_rows_average():
    pool = GroupMask(np.array([0, 1, 0, 1, 1])).pooling()
    np.testing.assert_allclose(pool, [[0.5, 0, 0.5, 0, 0], [0, 1 / 3, 0, 1 / 3, 1 / 3]])
