import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import oracles
from fedsim.errors import DataError, FormatError, GradCheckError, ParameterError, StructuralError
from fedsim.tensor import (
    ParamVector,
    Tensor,
    autodiff,
    concat,
    cross_entropy,
    dense_forward,
    grad_check,
    index,
    kl_divergence,
    mean,
    mse,
    mul,
    relu,
    segment_max,
    softmax_with_temperature,
    tsum,
)
from fedsim.tensor.params import sgd_step

finite = st.floats(-50, 50, allow_nan=False)


# dense_forward


def test_dense_identity_weights():
    out = dense_forward([[1.0, 2.0]], np.eye(2), [0.0, 0.0])
    np.testing.assert_array_equal(out.data, [[1, 2]])


def test_dense_zero_input_passes_bias():
    out = dense_forward([[0.0, 0.0]], np.random.default_rng(0).normal(size=(2, 2)), [3.0, 4.0])
    np.testing.assert_array_equal(out.data, [[3, 4]])


def test_dense_hand_multiply():
    out = dense_forward([[1.0, 1.0]], [[2.0, 3.0], [4.0, 5.0]], [1.0, 1.0])
    np.testing.assert_array_equal(out.data, [[7, 9]])


def test_dense_shape_mismatch_names_both_shapes():
    with pytest.raises(StructuralError, match=r"\(1, 3\).*\(2, 2\)"):
        dense_forward(np.ones((1, 3)), np.ones((2, 2)), np.zeros(2))


# softmax


def test_softmax_symmetric():
    np.testing.assert_allclose(softmax_with_temperature([0.0, 0.0], 1.0).data, [0.5, 0.5], atol=1e-15)


def test_softmax_temperature_ten():
    out = softmax_with_temperature([1.0, 2.0, 3.0], 10.0).data
    np.testing.assert_allclose(out, [0.3006, 0.3322, 0.3672], atol=1e-3)
    np.testing.assert_allclose(out, oracles.softmax([1.0, 2.0, 3.0], 10.0), atol=1e-14)


def test_softmax_high_temperature_uniform():
    logits = np.random.default_rng(1).normal(size=7) * 20
    out = softmax_with_temperature(logits, 1e6).data
    assert np.max(np.abs(out - 1 / 7)) < 1e-3


@pytest.mark.parametrize("tau", [0.0, -1.0])
def test_softmax_rejects_nonpositive_tau(tau):
    with pytest.raises(ParameterError):
        softmax_with_temperature([1.0, 2.0], tau)


@given(arrays(np.float64, st.integers(1, 8), elements=finite), st.floats(1e-2, 1e3))
def test_softmax_is_distribution_and_preserves_argmax(logits, tau):
    out = softmax_with_temperature(logits, tau).data
    assert np.all(out >= 0)
    assert abs(out.sum() - 1) <= 1e-12
    # order preserving: the largest logit keeps the largest probability
    assert out[np.argmax(logits)] == out.max()


# cross-entropy


def test_cross_entropy_confident_correct():
    assert cross_entropy([[1e6, 0.0, 0.0]], [0]).item() == pytest.approx(0.0, abs=1e-12)


def test_cross_entropy_uniform_ten_classes():
    assert cross_entropy(np.zeros((3, 10)), [0, 4, 9]).item() == pytest.approx(math.log(10), abs=1e-9)


def test_cross_entropy_matches_logsumexp_oracle():
    logits = np.random.default_rng(2).normal(size=(3, 4)) * 3
    labels = [1, 3, 0]
    assert cross_entropy(logits, labels).item() == pytest.approx(oracles.cross_entropy(logits.tolist(), labels), abs=1e-10)


@pytest.mark.parametrize("labels", [[0, 4], [-1, 0], [0.5, 1]])
def test_cross_entropy_rejects_bad_labels(labels):
    with pytest.raises(DataError):
        cross_entropy(np.zeros((2, 4)), labels)


# KL


@given(arrays(np.float64, st.integers(1, 6), elements=st.floats(0.01, 10)))
def test_kl_identity_is_zero(weights):
    p = weights / weights.sum()
    assert abs(kl_divergence(p, p).item()) <= 1e-12


def test_kl_analytic_ln2():
    assert kl_divergence([1.0, 0.0], [0.5, 0.5]).item() == pytest.approx(math.log(2), abs=1e-9)


def test_kl_random_pair_matches_sum_oracle():
    rng = np.random.default_rng(3)
    p, q = rng.dirichlet(np.ones(5)), rng.dirichlet(np.ones(5))
    assert kl_divergence(p, q).item() == pytest.approx(oracles.kl(p, q), abs=1e-10)


def test_kl_clamps_zero_q():
    value = kl_divergence([0.5, 0.5], [1.0, 0.0]).item()
    assert math.isfinite(value)
    assert value == pytest.approx(oracles.kl([0.5, 0.5], [1.0, 0.0]), rel=1e-12)


@given(
    arrays(np.float64, 4, elements=st.floats(0.01, 10)),
    arrays(np.float64, 4, elements=st.floats(0.01, 10)),
)
def test_kl_nonnegative(a, b):
    assert kl_divergence(a / a.sum(), b / b.sum()).item() >= -1e-15


# engine gradients


def _check(forward, params):
    return grad_check(autodiff(forward), params)


@pytest.mark.parametrize("seed", range(5))
def test_engine_ops_gradcheck(seed):
    rng = np.random.default_rng(seed)
    params = ParamVector({"a": rng.normal(size=(4, 3)) + 0.05, "b": rng.normal(size=3)})
    starts = np.array([0, 2])

    def forward(p):
        h = relu(mul(p["a"], p["b"]) + p["b"])
        pooled = segment_max(h * p["a"], starts)
        both = concat([pooled, index(h, slice(1, 3))], axis=0)
        return mean(both) + tsum(mul(both, both)) * 0.1

    assert _check(forward, params) < 1e-6


def test_mse_gradcheck_and_value():
    target = np.array([1.0, -2.0, 0.5])
    params = ParamVector({"pred": np.array([0.0, 0.0, 0.0])})
    assert mse(Tensor(params["pred"]), target).item() == pytest.approx((1 + 4 + 0.25) / 3)
    assert _check(lambda p: mse(p["pred"], target), params) < 1e-8


def test_linear_regression_gradcheck_under_1e6():
    rng = np.random.default_rng(4)
    x, y = rng.normal(size=(20, 9)), rng.normal(size=(20, 1))
    params = ParamVector({"w": rng.normal(size=(9, 1)), "b": rng.normal(size=1)})
    assert params.size == 10
    assert _check(lambda p: mse(dense_forward(x, p["w"], p["b"]), y), params) < 1e-6


def test_constant_function_has_zero_gradient():
    params = ParamVector({"w": np.arange(3.0)})
    loss, grad = autodiff(lambda p: mul(tsum(p["w"]), 0.0) + 5.0)(params)
    assert loss == 5.0
    np.testing.assert_array_equal(grad.flatten(), 0.0)
    assert _check(lambda p: mul(tsum(p["w"]), 0.0) + 5.0, params) == 0.0


def test_grad_check_empty_params_is_vacuous():
    assert grad_check(lambda p: (0.0, p), ParamVector()) == 0.0


def test_grad_check_reports_offending_coordinate():
    def loss_and_grad(p):
        w = p["w"]
        value = float(np.sum(w)) if w[1] <= 1.0 else float("inf")
        return value, p.unflatten(np.ones(p.size))

    with pytest.raises(GradCheckError) as err:
        grad_check(loss_and_grad, ParamVector({"w": np.array([0.0, 1.0])}))
    assert err.value.coordinate == 1
    assert "w[1]" in str(err.value)


def test_corrupted_gradient_is_detected():
    def loss_and_grad(p):
        return float(np.sum(p["w"] ** 2)), p * 2.0 + p.unflatten(np.full(p.size, 0.01))

    assert grad_check(loss_and_grad, ParamVector({"w": np.ones(3)})) > 1e-4


# ParamVector


@given(arrays(np.float64, st.integers(1, 12), elements=st.floats(allow_nan=False, allow_infinity=False)))
def test_flatten_unflatten_is_identity(values):
    p = ParamVector({"x": values.reshape(-1, 1), "y": values[:1]})
    again = p.unflatten(p.flatten())
    assert again.equals(p)
    assert again.flatten().tobytes() == p.flatten().tobytes()


def test_wire_format_layout():
    p = ParamVector({"ab": np.array([[1.0, 2.0]])})
    blob = p.to_bytes()
    assert blob[:4] == b"FSPV"
    assert blob[4:12] == (1).to_bytes(4, "little") + (1).to_bytes(4, "little")
    assert blob[12:14] == (2).to_bytes(2, "little") and blob[14:16] == b"ab"
    assert blob[16] == 2 and blob[17:25] == (1).to_bytes(4, "little") + (2).to_bytes(4, "little")
    assert np.frombuffer(blob[25:], "<f8").tolist() == [1.0, 2.0]
    assert ParamVector.from_bytes(blob).equals(p)
    assert len(blob) - 25 == p.nbytes


def test_wire_format_errors():
    blob = ParamVector({"w": np.ones(3)}).to_bytes()
    with pytest.raises(FormatError, match="offset"):
        ParamVector.from_bytes(blob[:-1])
    with pytest.raises(FormatError, match="trailing"):
        ParamVector.from_bytes(blob + b"\0")
    with pytest.raises(FormatError, match="magic"):
        ParamVector.from_bytes(b"XXXX" + blob[4:])


def test_incongruent_vectors_rejected():
    with pytest.raises(StructuralError):
        ParamVector({"w": np.ones(2)}) + ParamVector({"w": np.ones(3)})


@given(arrays(np.float64, 5, elements=finite), arrays(np.float64, 5, elements=finite))
def test_sgd_zero_lr_is_bit_identical(w, g):
    p, grad = ParamVector({"w": w}), ParamVector({"w": g})
    assert sgd_step(p, grad, 0.0).equals(p)
    np.testing.assert_array_equal(sgd_step(p, grad, 0.5).flatten(), w - 0.5 * g)
