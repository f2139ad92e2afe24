import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from _cases import PRIMITIVES, case
from umi import diffcore as dc
from umi.diffcore import ComputationRecord, DTensor


@pytest.mark.parametrize("name", PRIMITIVES)
def test_primitive_gradients(name):
    for seed in range(3):
        f, params = case(name, np.random.default_rng(seed))
        assert dc.grad_check(f, params) < 1e-6


def test_backward_accumulates_shared_leaf():
    x = DTensor(np.array([1.0, 2.0]), track=True)
    with ComputationRecord() as rec:
        y = dc.sum_(x * x + x)
    rec.backward(y)
    np.testing.assert_allclose(x.grad, 2 * x.data + 1)


def test_record_is_single_use():
    x = DTensor(np.ones(3), track=True)
    with ComputationRecord() as rec:
        y = dc.sum_(x)
    rec.backward(y)
    with pytest.raises(dc.RecordConsumedError):
        rec.backward(y)


def test_untracked_inputs_build_no_graph():
    x = DTensor(np.ones(3))
    with ComputationRecord() as rec:
        dc.sum_(x * 2.0)
    assert rec.nodes == []


def test_no_record_means_no_tape():
    x = DTensor(np.ones(3), track=True)
    y = dc.sum_(x)
    assert not y.track


def test_non_scalar_backward_needs_seed():
    x = DTensor(np.ones(3), track=True)
    with ComputationRecord() as rec:
        y = x * 2.0
    with pytest.raises(dc.DimensionError):
        rec.backward(y)


def test_explicit_seed():
    x = DTensor(np.ones(3), track=True)
    with ComputationRecord() as rec:
        y = x * 3.0
    rec.backward(y, seed=np.array([1.0, 0.0, 2.0]))
    np.testing.assert_allclose(x.grad, [3.0, 0.0, 6.0])


def test_matmul_shape_mismatch():
    with pytest.raises(dc.DimensionError):
        dc.matmul(DTensor(np.ones((2, 3))), DTensor(np.ones((2, 3))))


def test_non_finite_forward_is_reported():
    with pytest.raises(dc.NumericalInstabilityError) as err, np.errstate(over="ignore"):
        dc.mul(DTensor(np.array([1e200])), DTensor(np.array([1e200])))
    assert err.value.primitive == "mul"


def test_non_finite_input_rejected():
    with pytest.raises(dc.NumericalInstabilityError):
        DTensor(np.array([np.nan]))


def test_masked_attention_weights_are_exactly_zero():
    rng = np.random.default_rng(0)
    q, k = DTensor(rng.normal(size=(4, 3))), DTensor(rng.normal(size=(4, 3)))
    v = np.zeros((4, 3))
    v[2:] = 1e6  # masked values would show up immediately
    mask = np.array([[1, 1, 0, 0]] * 4)
    out = dc.attention(q, k, DTensor(v), mask)
    assert np.abs(out.data).max() == 0.0


def test_all_zero_mask_row_is_degenerate():
    x = DTensor(np.ones((2, 3)))
    with pytest.raises(dc.DegenerateMaskError):
        dc.attention(x, x, x, np.array([[1, 0], [0, 0]]))


def test_mask_must_be_binary():
    x = DTensor(np.ones((2, 3)))
    with pytest.raises(ValueError):
        dc.attention(x, x, x, np.array([[1, 0.5], [1, 1]]))


def test_scatter_rejects_repeated_indices():
    with pytest.raises(ValueError):
        dc.scatter(DTensor(np.ones((2, 3))), [1, 1], 4)


def test_amin_gradient_goes_to_first_minimizer():
    x = DTensor(np.array([[2.0, 1.0, 1.0]]), track=True)
    with ComputationRecord() as rec:
        y = dc.sum_(dc.amin(x, axis=-1))
    rec.backward(y)
    np.testing.assert_array_equal(x.grad, [[0.0, 1.0, 0.0]])


@given(st.integers(0, 10_000), st.integers(-3, 2))
def test_softmax_rows_are_distributions(seed, axis):
    x = DTensor(np.random.default_rng(seed).normal(size=(2, 3, 4)) * 10)
    y = dc.softmax(x, axis=axis).data
    np.testing.assert_allclose(y.sum(axis=axis), 1.0, atol=1e-12)
    assert (y >= 0).all()


@given(st.integers(0, 10_000))
def test_log_softmax_matches_log_of_softmax(seed):
    x = DTensor(np.random.default_rng(seed).normal(size=(3, 5)) * 5)
    np.testing.assert_allclose(dc.log_softmax(x).data, np.log(dc.softmax(x).data), atol=1e-10)


@given(st.integers(0, 10_000))
def test_layer_norm_output_is_standardized(seed):
    x = DTensor(np.random.default_rng(seed).normal(size=(4, 16)) * 3 + 1)
    y = dc.layer_norm(x, DTensor(np.ones(16)), DTensor(np.zeros(16))).data
    np.testing.assert_allclose(y.mean(axis=-1), 0.0, atol=1e-10)
    np.testing.assert_allclose(y.var(axis=-1), 1.0, atol=1e-3)


def test_grad_check_needs_wide_precision():
    x = DTensor(np.ones(3, dtype=np.float32), track=True)
    with pytest.raises(TypeError):
        dc.grad_check(lambda: dc.sum_(x), [x])


def test_grad_check_catches_a_wrong_gradient():
    x = DTensor(np.array([0.3, -1.2]), track=True)

    def bad_square(t):
        return dc._emit("bad", t.data ** 2, (t,), lambda g: (g * t.data,))  # missing factor 2

    assert dc.grad_check(lambda: dc.sum_(bad_square(x)), [x]) > 0.1


def test_gelu_reference_values():
    # tanh form, values from the closed form evaluated independently
    x = np.array([-2.0, 0.0, 1.0])
    ref = 0.5 * x * (1 + np.tanh(np.sqrt(2 / np.pi) * (x + 0.044715 * x ** 3)))
    np.testing.assert_allclose(dc.gelu(DTensor(x)).data, ref, rtol=1e-12)
