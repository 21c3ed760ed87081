from __future__ import annotations

import math

import numpy as np
import pytest

from vort.plasticity import (
    DescentHistory,
    PlasticityConfig,
    PlasticityError,
    RetrievalTrace,
    SoeFamily,
    boundary_flags,
    descent_inequality_slack,
    estimate_smoothness,
    local_pl_ratios,
    loss_alpha_grad,
    loss_alpha_grads,
    make_planted_trace,
    pl_envelope,
    plasticity_descent,
    retrieval_loss,
    shared_order_objective,
)
from vort.soe import build_soe, soe_weight


def _random_trace(n=50, d_k=6, n_queries=12, seed=0):
    rng = np.random.default_rng(seed)
    keys = rng.normal(size=(n, d_k))
    pos = np.sort(rng.choice(np.arange(2, n + 1), size=n_queries, replace=False))
    src = np.array([rng.integers(0, t) for t in pos])
    queries = keys[src] + 0.5 * rng.normal(size=(n_queries, d_k))
    return RetrievalTrace(keys, pos, queries, src)


def _direct_loss(trace, alphas, horizon, eps, S):
    """Straight-line evaluation with one exponential sum built per token order."""
    kern = {}
    total = 0.0
    for t, q, src in zip(trace.query_positions, trace.queries, trace.sources):
        r = []
        for i in range(t):
            a = float(alphas[i])
            if a >= 1.0:
                w = 1.0
            else:
                if a not in kern:
                    kern[a] = build_soe(a, horizon, eps, n_terms=S)
                w = soe_weight(kern[a], t - i)
            r.append(math.exp(float(q @ trace.keys[i]) / math.sqrt(trace.d_k)) * w)
        total -= math.log(r[src] / sum(r))
    return total


# ---- loss ------------------------------------------------------------------------------


def test_single_candidate_has_zero_loss():
    trace = RetrievalTrace(np.ones((3, 2)), np.array([1]), np.ones((1, 2)), np.array([0]))
    fam = SoeFamily(10, 1e-3, 8)
    assert retrieval_loss(trace, np.full(3, 0.5), fam) == 0.0
    assert np.all(loss_alpha_grads(trace, np.full(3, 0.5), fam) == 0.0)


def test_symmetric_pair_gives_log_two():
    # identical keys and identical kernel weights (running sum) for both candidates
    keys = np.ones((4, 3))
    trace = RetrievalTrace(keys, np.array([2, 2, 2]), np.random.default_rng(0).normal(size=(3, 3)), np.array([0, 1, 0]))
    assert retrieval_loss(trace, np.ones(4), SoeFamily(10)) == pytest.approx(3 * math.log(2), rel=1e-14)


def test_loss_matches_direct_evaluation():
    trace = _random_trace()
    alphas = np.random.default_rng(1).uniform(0.2, 1.0, 50)
    alphas[::7] = 1.0
    fam = SoeFamily(50, 1e-3, 12)
    assert retrieval_loss(trace, alphas, fam) == pytest.approx(_direct_loss(trace, alphas, 50, 1e-3, 12), abs=1e-10)


def test_loss_is_nonnegative():
    trace = _random_trace(seed=4)
    fam = SoeFamily(50)
    for seed in range(5):
        assert retrieval_loss(trace, np.random.default_rng(seed).uniform(0.1, 1.0, 50), fam) >= 0


def test_trace_validation():
    keys = np.zeros((5, 2))
    with pytest.raises(ValueError):
        RetrievalTrace(keys, np.array([3]), np.zeros((1, 2)), np.array([3]))
    with pytest.raises(ValueError):
        RetrievalTrace(keys, np.array([3, 4]), np.zeros((1, 2)), np.array([0, 1]))
    with pytest.raises(ValueError):
        RetrievalTrace(keys, np.array([6]), np.zeros((1, 2)), np.array([0]))
    trace = RetrievalTrace(keys, np.array([3]), np.zeros((1, 2)), np.array([0]))
    with pytest.raises(ValueError):
        retrieval_loss(trace, np.full(4, 0.5), SoeFamily(10))
    with pytest.raises(ValueError):
        retrieval_loss(trace, np.full(5, 1.2), SoeFamily(10))


# ---- order gradient ---------------------------------------------------------------------


def test_gradient_matches_finite_differences():
    trace = _random_trace(seed=2)
    fam = SoeFamily(50, 1e-3, 12)
    alphas = np.random.default_rng(3).uniform(0.2, 0.95, 50)
    g = loss_alpha_grads(trace, alphas, fam)
    h = 1e-5
    for i in range(0, 50, 3):
        up, dn = alphas.copy(), alphas.copy()
        up[i] += h
        dn[i] -= h
        fd = (retrieval_loss(trace, up, fam) - retrieval_loss(trace, dn, fam)) / (2 * h)
        assert abs(g[i] - fd) <= 1e-4
        assert loss_alpha_grad(trace, alphas, fam, i) == g[i]


def test_gradient_zero_for_uninvolved_tokens():
    trace = _random_trace(n=50, seed=5)
    last = int(trace.query_positions.max())
    g = loss_alpha_grads(trace, np.full(50, 0.5), SoeFamily(50))
    # tokens at or after the last query position are never candidates
    assert np.all(g[last:] == 0.0)


def test_running_sum_tokens_have_zero_gradient():
    trace = _random_trace(seed=6)
    alphas = np.full(50, 0.6)
    alphas[10] = 1.0
    assert loss_alpha_grads(trace, alphas, SoeFamily(50))[10] == 0.0


def test_boundary_flags():
    assert boundary_flags([0.1, 0.5, 1.0, 0.05], 0.1).tolist() == [True, False, True, True]


def test_family_matches_built_soe():
    fam = SoeFamily(300, 1e-3, 12)
    a = build_soe(0.45, 300, 1e-3, n_terms=12)
    assert np.array_equal(fam.xi, a.xi)
    assert fam.coeffs(0.45) == pytest.approx(a.coeffs, rel=1e-13)


# ---- descent --------------------------------------------------------------------------------


def _quadratic(alpha):
    return (alpha - 0.6) ** 2, 2 * (alpha - 0.6)


@pytest.mark.parametrize("alpha0", [0.1, 0.35, 0.6, 0.99, 1.0])
def test_newton_step_on_quadratic(alpha0):
    hist = plasticity_descent(_quadratic, alpha0, PlasticityConfig(eta=0.5, iterations=3, delta=0.1, L_hat=2.0))
    assert hist.alphas[1] == pytest.approx(0.6, abs=1e-15)
    assert len(hist.alphas) == 4


def test_quadratic_rate_and_envelope():
    eta, mu = 0.25, 2.0
    hist = plasticity_descent(_quadratic, 0.95, PlasticityConfig(eta=eta, iterations=25, delta=0.1, L_hat=2.0))
    _, F, _ = hist.as_arrays()
    # alpha - 0.6 contracts by 1 - 2 eta each step, so the gap by (1 - 2 eta)^2;
    # compare while alpha - 0.6 is still far above rounding
    assert F[1:13] / F[:12] == pytest.approx(np.full(12, (1 - 2 * eta) ** 2), rel=1e-9)
    assert np.all(F <= pl_envelope(F, 0.0, eta, mu) * (1 + 1e-12))
    assert np.all(descent_inequality_slack(hist, eta, 2.0) >= -1e-15)


def test_projection_keeps_iterates_in_range():
    def steep(alpha):
        return -5 * alpha, -5.0

    hist = plasticity_descent(steep, 0.5, PlasticityConfig(eta=1.0, iterations=5, delta=0.2))
    assert hist.alphas[-1] == 1.0
    hist = plasticity_descent(lambda a: (5 * a, 5.0), 0.5, PlasticityConfig(eta=1.0, iterations=5, delta=0.2))
    assert min(hist.alphas) == 0.2
    assert all(0.2 <= a <= 1.0 for a in hist.alphas)


def test_non_finite_gradient_aborts_with_history():
    def bad(alpha):
        return 0.0, (float("nan") if alpha < 0.5 else 1.0)

    with pytest.raises(PlasticityError) as info:
        plasticity_descent(bad, 0.9, PlasticityConfig(eta=0.3, iterations=10, delta=0.1))
    assert len(info.value.history.alphas) == 3


def test_config_validation():
    with pytest.raises(ValueError):
        PlasticityConfig(eta=0.0, iterations=3)
    with pytest.raises(ValueError):
        PlasticityConfig(eta=0.1, iterations=0)
    with pytest.raises(ValueError):
        PlasticityConfig(eta=0.6, iterations=3, L_hat=2.0)
    with pytest.raises(ValueError):
        plasticity_descent(_quadratic, 0.05, PlasticityConfig(eta=0.1, iterations=3, delta=0.1))


def test_history_csv():
    hist = DescentHistory([0.5, 0.4], [1.0, 0.5], [-2.0, 0.25])
    assert hist.to_csv().splitlines() == ["l,alpha,F,abs_grad", "0,0.5,1.0,2.0", "1,0.4,0.5,0.25"]


def test_smoothness_of_quadratic():
    assert estimate_smoothness(_quadratic, 0.1, 1.0) == pytest.approx(2.0, rel=1e-6)


@pytest.fixture(scope="module")
def planted():
    trace = make_planted_trace(256, 16, 48, 0)
    F = shared_order_objective(trace, SoeFamily(256, 1e-3, 15))
    L_hat = estimate_smoothness(F, 0.1, 1.0)
    return F, L_hat


def test_shared_order_gradient(planted):
    F, _ = planted
    h = 1e-5
    for a in (0.3, 0.6, 0.9):
        fd = (F(a + h)[0] - F(a - h)[0]) / (2 * h)
        assert F(a)[1] == pytest.approx(fd, abs=1e-4)


def test_planted_descent_is_monotone(planted):
    F, L_hat = planted
    hist = plasticity_descent(F, 0.9, PlasticityConfig(eta=1.0 / L_hat, iterations=20, delta=0.1, L_hat=L_hat))
    alphas, vals, _ = hist.as_arrays()
    assert np.all(np.diff(vals) <= 1e-10 * abs(vals[0]))
    assert np.all((alphas >= 0.1) & (alphas <= 1.0))
    # interior optimum: the iterates settle away from both ends
    assert 0.1 < alphas[-1] < 1.0


def test_planted_descent_inequality(planted):
    F, L_hat = planted
    L = 2 * L_hat
    eta = 1.0 / L
    hist = plasticity_descent(F, 0.2, PlasticityConfig(eta=eta, iterations=20, delta=0.1, L_hat=L))
    alphas = np.array(hist.alphas)
    slack = descent_inequality_slack(hist, eta, L)
    interior = (alphas[1:] > 0.1) & (alphas[1:] < 1.0)
    assert np.all(slack[interior] >= -1e-10 * abs(hist.values[0]))


def test_planted_local_pl(planted):
    F, L_hat = planted
    hist = plasticity_descent(F, 0.9, PlasticityConfig(eta=1.0 / L_hat, iterations=30, delta=0.1, L_hat=L_hat))
    ratios = local_pl_ratios(hist)
    assert len(ratios) > 0
    assert np.min(ratios) > 0


def test_planted_trace_shape_and_determinism():
    a, b = make_planted_trace(64, 8, 10, 3), make_planted_trace(64, 8, 10, 3)
    assert np.array_equal(a.queries, b.queries) and np.array_equal(a.sources, b.sources)
    assert a.keys.shape == (64, 8) and len(a.query_positions) == 10
    assert np.all(a.sources < a.query_positions)
    with pytest.raises(ValueError):
        make_planted_trace(8, 4, 2, 0)
