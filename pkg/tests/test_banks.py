from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vort.banks import (
    BankKernel,
    BankState,
    RoutingConfig,
    TokenFeatures,
    assign_order,
    attention_entropy,
    bank_fractional_state,
    bank_step,
    growth_profile,
    make_bank_state,
    nearest_bank,
    routing_orders,
)
from vort.gl_kernel import gl_partial_sum
from vort.soe import soe_weight


def _cfg(delta=0.1, K=4, dim=3, bias=0.0, seed=0):
    w = np.random.default_rng(seed).normal(size=dim)
    return RoutingConfig(delta, K, w, bias)


def _state(delta=0.2, K=3, horizon=300, d_v=4, n_terms=12):
    return make_bank_state(RoutingConfig(delta, K, np.zeros(1)), horizon, d_v, 1e-3, n_terms)


def _convolution(state, tokens, t):
    """Direct weighted sum per bank over the (position, bank, value) history."""
    out = [np.zeros(state.d_v) for _ in range(state.K)]
    for i, k, v in tokens:
        out[k - 1] += state.kernels[k - 1].weight(t - 1 - i) * v
    return out


# ---- routing ---------------------------------------------------------------------


def test_config_validation_and_orders():
    cfg = RoutingConfig(0.4, 4, np.zeros(2))
    assert cfg.orders == pytest.approx([0.55, 0.7, 0.85, 1.0])
    assert cfg.orders[-1] == 1.0
    with pytest.raises(ValueError):
        RoutingConfig(0.0, 4, np.zeros(2))
    with pytest.raises(ValueError):
        RoutingConfig(0.5, 0, np.zeros(2))


@pytest.mark.parametrize("delta,K", [(0.1, 1), (0.1, 9), (0.4, 4), (0.05, 16)])
def test_grid_spacing(delta, K):
    orders = RoutingConfig(delta, K, np.zeros(1)).orders
    assert np.all(np.diff(orders) > 0)
    assert np.max(np.diff(orders), initial=(1 - delta) / K) == pytest.approx((1 - delta) / K, rel=1e-12)


def test_token_features_validation():
    with pytest.raises(ValueError):
        TokenFeatures(np.zeros(2), entropy=-0.1)
    with pytest.raises(ValueError):
        TokenFeatures(np.zeros(2), entity_flag=2)
    f = TokenFeatures(np.array([1.0, 2.0]), entropy=0.5, entity_flag=1)
    assert f.vector().tolist() == [1.0, 2.0, 0.5, 1.0]


def test_attention_entropy():
    assert attention_entropy([1.0, 0.0, 0.0]) == 0.0
    assert attention_entropy(np.full(8, 1 / 8)) == pytest.approx(np.log(8), rel=1e-14)


def test_zero_weights_give_midpoint():
    cfg = RoutingConfig(0.3, 4, np.zeros(3))
    alpha, _ = assign_order(TokenFeatures(np.array([5.0]), 1.0, 1), cfg)
    assert alpha == pytest.approx(0.3 + 0.7 / 2, rel=1e-15)


def test_large_bias_routes_to_top_bank():
    cfg = RoutingConfig(0.3, 4, np.zeros(3), bias=1e3)
    alpha, k = assign_order(TokenFeatures(np.array([5.0]), 1.0, 0), cfg)
    assert alpha == pytest.approx(1.0)
    assert k == 4


def test_nearest_bank_exact_grid_point():
    cfg = RoutingConfig(0.1, 9, np.zeros(1))
    assert nearest_bank(0.5, cfg) == 4
    assert cfg.orders[3] == pytest.approx(0.5)


def test_nearest_bank_ties_go_up_and_clip():
    # orders 0.75 and 1.0; the midpoint 0.875 is exact in binary
    assert nearest_bank(0.875, RoutingConfig(0.5, 2, np.zeros(1))) == 2
    cfg = RoutingConfig(0.2, 4, np.zeros(1))
    assert nearest_bank(0.2, cfg) == 1
    assert nearest_bank(np.array([0.41, 0.59, 0.99]), cfg).tolist() == [1, 2, 4]


def test_nearest_bank_matches_argmin():
    cfg = RoutingConfig(0.15, 7, np.zeros(1))
    alphas = np.random.default_rng(1).uniform(0.15, 1.0, 2000)
    ref = np.argmin(np.abs(alphas[:, None] - cfg.orders[None, :]), axis=1) + 1
    assert np.array_equal(nearest_bank(alphas, cfg), ref)


def test_dimension_mismatch():
    cfg = _cfg(dim=4)
    with pytest.raises(ValueError):
        assign_order(TokenFeatures(np.zeros(1)), cfg)


def test_orders_stay_in_range():
    cfg = _cfg(delta=0.25, K=5, dim=6, bias=0.3)
    feats = np.random.default_rng(2).normal(scale=5.0, size=(100_000, 6))
    a = routing_orders(feats, cfg)
    assert np.all((a >= 0.25) & (a <= 1.0))
    k = nearest_bank(a, cfg)
    assert np.all((k >= 1) & (k <= 5))


# ---- bank updates ------------------------------------------------------------------------


def test_alpha_one_bank_is_running_sum():
    kern = BankKernel.from_order(1.0, 100)
    assert kern.n_terms == 1
    assert kern.weight(np.arange(50)) == pytest.approx(np.ones(50))


def test_kernel_weight_matches_soe_weight():
    kern = BankKernel.from_order(0.6, 500, 1e-3, n_terms=12)
    j = np.arange(500)
    assert kern.weight(j) == pytest.approx(soe_weight(kern.soe, j), rel=1e-12)


def test_initial_state_is_zero():
    state = _state()
    for k in range(1, state.K + 1):
        assert np.array_equal(bank_fractional_state(state, k), np.zeros(state.d_v))


def test_single_token_from_zero():
    state = _state()
    v = np.array([1.0, -2.0, 0.5, 3.0])
    bank_step(state, v, 2)
    kern = state.kernels[1]
    assert state.states[1] == pytest.approx(kern.coeffs[:, None] * v[None, :], rel=1e-15)
    assert not state.states[0].any() and not state.states[2].any()


def test_other_banks_decay():
    state = _state()
    rng = np.random.default_rng(3)
    for _ in range(5):
        bank_step(state, rng.normal(size=4), 1)
    before = state.states[0].copy()
    bank_step(state, rng.normal(size=4), 2)
    assert state.states[0] == pytest.approx(state.kernels[0].rates[:, None] * before, rel=1e-15)


def test_lag_response():
    state = _state()
    v = np.array([0.5, 1.0, -1.0, 2.0])
    bank_step(state, v, 1)
    for _ in range(37):
        bank_step(state, np.zeros(4), 3)
    assert bank_fractional_state(state, 1) == pytest.approx(soe_weight(state.kernels[0].soe, 37) * v, rel=1e-12)


def test_step_errors():
    state = _state()
    with pytest.raises(IndexError):
        bank_step(state, np.zeros(4), 0)
    with pytest.raises(IndexError):
        bank_step(state, np.zeros(4), 4)
    with pytest.raises(ValueError):
        bank_step(state, np.zeros(3), 1)
    with pytest.raises(IndexError):
        bank_fractional_state(state, 5)


def _relerr(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300)


def test_random_trace_matches_convolution():
    state = _state(K=3, horizon=300)
    rng = np.random.default_rng(4)
    tokens = []
    for i in range(200):
        v, k = rng.normal(size=4), int(rng.integers(1, 4))
        bank_step(state, v, k)
        tokens.append((i, k, v))
    for k, ref in enumerate(_convolution(state, tokens, 200), start=1):
        assert _relerr(bank_fractional_state(state, k), ref) <= 1e-10


@settings(max_examples=100, deadline=None)
@given(
    seed=st.integers(0, 2**31),
    T=st.integers(1, 300),
    K=st.integers(1, 4),
    d_v=st.integers(1, 8),
    delta=st.floats(0.1, 0.6),
)
def test_recurrence_equals_convolution(seed, T, K, d_v, delta):
    state = make_bank_state(RoutingConfig(delta, K, np.zeros(1)), 300, d_v, 1e-3, 10)
    rng = np.random.default_rng(seed)
    tokens = []
    for i in range(T):
        v, k = rng.normal(size=d_v), int(rng.integers(1, K + 1))
        bank_step(state, v, k)
        tokens.append((i, k, v))
    for k, ref in enumerate(_convolution(state, tokens, T), start=1):
        got = bank_fractional_state(state, k)
        if np.linalg.norm(ref) == 0:
            assert np.linalg.norm(got) == 0
        else:
            assert _relerr(got, ref) <= 1e-9


def test_constant_inputs_track_partial_sum():
    eps, T = 1e-3, 300
    state = make_bank_state(RoutingConfig(0.1, 3, np.zeros(1)), T, 1, eps, 15)
    assert state.kernels[0].soe.certified_error <= eps
    for _ in range(T):
        bank_step(state, np.ones(1), 1)
    alpha = state.kernels[0].alpha
    got = bank_fractional_state(state, 1)[0]
    assert abs(got - gl_partial_sum(alpha, T)) <= T * eps
    assert got == pytest.approx(state.kernels[0].weight(np.arange(T)).sum(), rel=1e-12)


def test_state_norm_bound():
    eps, T = 1e-3, 300
    state = make_bank_state(RoutingConfig(0.1, 3, np.zeros(1)), T, 3, eps, 15)
    assert state.kernels[0].soe.certified_error <= eps
    rng = np.random.default_rng(5)
    for t in range(1, T + 1):
        v = rng.normal(size=3)
        bank_step(state, v / np.linalg.norm(v), 1)
        bound = gl_partial_sum(state.kernels[0].alpha, t) + t * eps
        assert np.linalg.norm(bank_fractional_state(state, 1)) <= bound


def test_snapshot_roundtrip():
    state = _state()
    rng = np.random.default_rng(6)
    for _ in range(20):
        bank_step(state, rng.normal(size=4), int(rng.integers(1, 4)))
    back = BankState.from_json(state.to_json())
    assert back.t == state.t == 20
    for a, b in zip(state.states, back.states):
        assert np.array_equal(a, b)
    for a, b in zip(state.kernels, back.kernels):
        assert a.alpha == b.alpha and np.array_equal(a.rates, b.rates) and np.array_equal(a.coeffs, b.coeffs)
    v = rng.normal(size=4)
    bank_step(state, v, 2)
    bank_step(back, v, 2)
    assert np.array_equal(bank_fractional_state(state, 2), bank_fractional_state(back, 2))


def test_snapshot_version_checked():
    blob = _state().to_json().replace('"version": 1', '"version": 99')
    with pytest.raises(ValueError):
        BankState.from_json(blob)


# ---- growth ---------------------------------------------------------------------------------


def test_growth_alpha_one_is_linear():
    prof = growth_profile(1.0, 100, 2.5)
    assert np.array_equal(prof[:, 1], 2.5 * prof[:, 0])


def test_growth_slope_half():
    prof = growth_profile(0.5, 10_000)
    sel = prof[99:]
    slope = np.polyfit(np.log(sel[:, 0]), np.log(sel[:, 1]), 1)[0]
    assert abs(slope - 0.5) <= 0.02


@pytest.mark.parametrize("alpha", [0.1, 0.5, 0.9, 1.0])
def test_growth_nondecreasing(alpha):
    prof = growth_profile(alpha, 500, 0.7)
    assert np.all(np.diff(prof[:, 1]) >= 0)
    assert prof[-1, 1] == pytest.approx(0.7 * gl_partial_sum(alpha, 500), rel=1e-12)


def test_growth_precondition():
    with pytest.raises(ValueError):
        growth_profile(0.5, 9)
