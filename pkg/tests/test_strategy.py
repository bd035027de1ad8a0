import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from oracles import filtered_penalty, option_ii_closed_form

from fedsim.errors import ConfigError, StructuralError
from fedsim.fedcore import FedAvg, FedKd, FedProx, Fedr, OptionI, OptionII
from fedsim.fedcore.strategy import (
    blend_delta,
    downloads_per_round,
    history_capacity,
    prox_penalty,
    reg_penalty,
)
from fedsim.tensor import ParamVector


def pv(values):
    return ParamVector({"w": np.asarray(values, dtype=np.float64)})


def blend(history, mode, prev=None):
    prev = pv(np.zeros(len(history[0]) if history else 1)) if prev is None else pv(prev)
    return blend_delta([pv(h) for h in history], mode, prev)["w"].tolist()


def test_option_ii_midpoint():
    assert blend([[4.0]], OptionII(0.5), [2.0]) == [3.0]


def test_option_i_examples():
    mode = OptionI((0.2, 0.3, 0.5))
    assert blend([[1.0], [1.0], [1.0]], mode) == pytest.approx([1.0], abs=1e-15)
    assert blend([[10.0], [0.0], [0.0]], mode) == [2.0]


def test_option_i_short_history_counts_missing_as_zero():
    assert blend([[10.0]], OptionI((0.2, 0.3, 0.5))) == [2.0]


def test_option_ii_without_history_keeps_previous():
    assert blend([], OptionII(0.3), [1.5]) == [1.5]


def test_option_ii_closed_form_over_fifty_rounds():
    rng = np.random.default_rng(0)
    a = 0.35
    raw = [rng.normal(size=6).tolist() for _ in range(50)]
    blended = pv(np.zeros(6))
    for t in range(1, 51):
        blended = blend_delta([pv(raw[t - 1])], OptionII(a), blended)
        np.testing.assert_allclose(blended["w"], option_ii_closed_form(raw[:t], a), atol=1e-10, rtol=0)


@given(st.lists(st.lists(st.floats(-1e3, 1e3), min_size=4, max_size=4), min_size=1, max_size=3))
def test_option_i_matches_dot_product(history):
    coeffs = (0.2, 0.3, 0.5)
    expected = [sum(c * h[j] for c, h in zip(coeffs, history)) for j in range(4)]
    np.testing.assert_allclose(blend(history, OptionI(coeffs)), expected, atol=1e-12, rtol=1e-12)


def test_blend_rejects_incongruent_history():
    with pytest.raises(StructuralError):
        blend_delta([pv([1.0, 2.0])], OptionII(0.5), pv([0.0]))


# coefficient validation


@pytest.mark.parametrize("coeffs", [(0.5, 0.5 + 1e-9), (), (0.1, 0.2, 0.3, 0.2, 0.2)])
def test_option_i_rejects_bad_coefficients(coeffs):
    with pytest.raises(ConfigError) as info:
        OptionI(coeffs)
    assert info.value.field == "strategy.fedr.coeffs"


def test_option_i_accepts_rounding_noise():
    OptionI((0.1, 0.2, 0.7))
    OptionI((1 / 3, 1 / 3, 1 / 3))


@pytest.mark.parametrize("a", [0.0, 1.0, -0.1, 1.5])
def test_option_ii_rejects_decay_outside_open_interval(a):
    with pytest.raises(ConfigError):
        OptionII(a)


def test_strategy_validation():
    with pytest.raises(ConfigError):
        Fedr(mu=-1.0)
    with pytest.raises(ConfigError):
        FedProx(mu=float("nan"))
    with pytest.raises(ConfigError):
        FedKd(alpha=1.5)
    with pytest.raises(ConfigError):
        FedKd(temperature=0.0)
    assert Fedr(0.1, mu_overrides={3: 0.5}).mu_for(3) == 0.5
    assert Fedr(0.1, mu_overrides={3: 0.5}).mu_for(2) == 0.1


def test_history_and_download_counts():
    assert history_capacity(Fedr(delta_mode=OptionI((0.2, 0.3, 0.5)))) == 3
    assert history_capacity(FedAvg()) == 1
    assert downloads_per_round(Fedr()) == 2
    assert downloads_per_round(FedKd(inner=Fedr())) == 2
    assert downloads_per_round(FedProx()) == 1


# the filtered penalty


def test_reg_penalty_hand_example():
    w_t = pv([0.0, 0.0])
    value, grad = reg_penalty(pv([1.0, -1.0]), w_t, pv([1.0, 1.0]), 0.1)
    assert value == pytest.approx(0.2, abs=1e-15)
    np.testing.assert_allclose(grad["w"], [0.0, -0.2], atol=1e-15)


def test_aligned_update_has_no_penalty():
    rng = np.random.default_rng(1)
    w_t, delta = rng.normal(size=8), rng.normal(size=8)
    value, grad = reg_penalty(pv(w_t + delta), pv(w_t), pv(delta), 3.0)
    assert value == 0.0 and not grad["w"].any()


def test_zero_delta_has_no_penalty():
    value, grad = reg_penalty(pv([1.0, -2.0]), pv([0.0, 0.0]), pv([0.0, 0.0]), 1.0)
    assert value == 0.0 and not grad["w"].any()


def test_filter_matches_oracle_on_random_triples():
    rng = np.random.default_rng(2)
    for _ in range(1000):
        d = int(rng.integers(1, 9))
        w_k, w_t, delta = rng.normal(size=(3, d))
        mu = float(rng.uniform(0, 2))
        value, grad = reg_penalty(pv(w_k), pv(w_t), pv(delta), mu)
        ref_value, ref_grad = filtered_penalty((w_k - w_t).tolist(), delta.tolist(), mu)
        assert value == pytest.approx(ref_value, rel=1e-12, abs=1e-15)
        np.testing.assert_allclose(grad["w"], ref_grad, rtol=1e-12, atol=1e-15)


@given(st.lists(st.tuples(st.floats(-1e3, 1e3), st.floats(-1e3, 1e3), st.floats(-1e3, 1e3)), min_size=1, max_size=10))
def test_zero_mu_switches_penalty_off(rows):
    w_k, w_t, delta = (pv(col) for col in zip(*rows))
    value, grad = reg_penalty(w_k, w_t, delta, 0.0)
    assert value == 0.0 and not grad["w"].any()


def test_penalty_is_filtered_not_global():
    # the global inner product is positive, yet coordinate 1 still opposes delta
    value, _ = reg_penalty(pv([5.0, -0.1]), pv([0.0, 0.0]), pv([1.0, 1.0]), 1.0)
    assert value == pytest.approx(0.5 * 1.1**2)


def test_prox_penalty():
    value, grad = prox_penalty(pv([1.0, 3.0]), pv([0.0, 1.0]), 0.5)
    assert value == pytest.approx(0.25 * 5)
    np.testing.assert_array_equal(grad["w"], [0.5, 1.0])


def test_penalties_check_congruence():
    with pytest.raises(StructuralError):
        reg_penalty(pv([1.0]), pv([1.0, 2.0]), pv([0.0]), 1.0)
