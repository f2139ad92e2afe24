import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from umi import diffcore as dc
from umi.alignment import LearnableTokens, align_loss, assign_token, average_feature
from umi.diffcore import ComputationRecord, DTensor
from umi.projection import ProjectedTokens


def tokens(arr):
    U = LearnableTokens(len(arr), len(arr[0]), np.random.default_rng(0), dtype=np.float64)
    U.tokens.data = np.asarray(arr, dtype=np.float64)
    return U


def test_average_feature_examples():
    np.testing.assert_array_equal(average_feature(DTensor(np.tile([1.0, 2.0], (3, 1)))).data, [1.0, 2.0])
    np.testing.assert_array_equal(average_feature(ProjectedTokens(0, DTensor(np.eye(2)))).data, [0.5, 0.5])
    np.testing.assert_array_equal(average_feature(DTensor(np.zeros((4, 3)))).data, np.zeros(3))


def test_assign_token_examples():
    U = tokens([[5, 5], [0, 0.9], [-3, 2]])
    assert assign_token(DTensor(np.array([0.0, 1.0])), "regression", None, U) == 1
    assert assign_token(None, "classification", 2, tokens(np.zeros((4, 2)))) == 2
    tie = tokens([[1.0, 0.0], [-1.0, 0.0]])
    assert assign_token(np.zeros(2), "retrieval", None, tie) == 0


def test_assign_token_errors():
    U = tokens(np.zeros((3, 2)))
    with pytest.raises(IndexError):
        assign_token(None, "classification", 3, U)
    with pytest.raises(ValueError):
        assign_token(None, "classification", None, U)


def test_assign_token_batch_matches_brute_force():
    rng = np.random.default_rng(0)
    U = tokens(rng.normal(size=(7, 3)))
    f = rng.normal(size=(20, 3))
    want = [min(range(7), key=lambda j: (((f[i] - U.tokens.data[j]) ** 2).sum(), j)) for i in range(20)]
    np.testing.assert_array_equal(assign_token(f, "regression", None, U), want)


@given(st.integers(0, 2 ** 31))
def test_assignment_is_translation_invariant(seed):
    rng = np.random.default_rng(seed)
    u = rng.normal(size=(5, 3))
    f = rng.normal(size=3)
    c = rng.normal(size=3)
    assert assign_token(f, "regression", None, tokens(u)) == assign_token(f + c, "regression", None, tokens(u + c))


def test_align_loss_examples():
    U = tokens([[0.0, 0.0], [1.0, 1.0]])
    assert float(align_loss({0: DTensor(np.array([1.0, 0.0]))}, {0: 0}, U).data) == 1.0
    feats = {0: DTensor(np.array([1.0, 0.0])), 1: DTensor(np.array([1.0, 2.0]))}
    assert float(align_loss(feats, {0: 0, 1: 1}, U).data) == 2.0
    exact = {0: DTensor(np.array([1.0, 1.0]))}
    assert float(align_loss(exact, {0: 1}, U).data) == 0.0


def test_align_loss_needs_matching_assignments():
    with pytest.raises(ValueError):
        align_loss({0: DTensor(np.zeros(2))}, {1: 0}, tokens(np.zeros((2, 2))))


@given(st.integers(0, 2 ** 31))
def test_align_loss_is_nonnegative_sum(seed):
    rng = np.random.default_rng(seed)
    U = tokens(rng.normal(size=(4, 3)))
    feats = {m: DTensor(rng.normal(size=3)) for m in range(3)}
    assign = {m: int(rng.integers(0, 4)) for m in range(3)}
    total = float(align_loss(feats, assign, U).data)
    parts = sum(float(align_loss({m: feats[m]}, {m: assign[m]}, U).data) for m in feats)
    assert total >= 0
    assert total == pytest.approx(parts, rel=1e-12)


def test_align_gradient_is_twice_the_offset():
    U = tokens([[0.5, -1.0], [2.0, 0.0]])
    f = DTensor(np.array([1.0, 3.0]), track=True)
    U.tokens.grad = None
    with ComputationRecord() as rec:
        loss = align_loss({0: f}, {0: 0}, U)
    rec.backward(loss)
    np.testing.assert_allclose(f.grad, 2 * (f.data - U.tokens.data[0]))
    np.testing.assert_allclose(U.tokens.grad[0], -2 * (f.data - U.tokens.data[0]))
    assert dc.grad_check(lambda: align_loss({0: f}, {0: 0}, U), [f, U.tokens]) < 1e-6


def test_batched_features():
    U = tokens([[0.0, 0.0], [1.0, 0.0]])
    f = DTensor(np.array([[1.0, 0.0], [1.0, 1.0]]))
    assert float(align_loss({0: f}, {0: np.array([0, 1])}, U).data) == 2.0
