from __future__ import annotations

import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vort.numerics import (
    IntegrationError,
    RngStream,
    adaptive_quad,
    digamma,
    gauss_legendre,
    log_gamma,
    rng_gaussian,
    rng_uniform,
)

EULER = 0.5772156649015329


def test_log_gamma_known_values():
    assert log_gamma(1.0) == 0.0
    assert log_gamma(0.5) == pytest.approx(0.5 * math.log(math.pi), abs=1e-14)
    assert log_gamma(5.0) == pytest.approx(math.log(24.0), abs=1e-14)


def test_log_gamma_against_mpmath():
    xs = np.geomspace(1e-3, 1e4, 60)
    got = log_gamma(xs)
    for x, g in zip(xs, got):
        ref = float(mpmath.loggamma(mpmath.mpf(float(x))))
        # above |ln Gamma| ~ 4500 a double cannot hold 1e-12 absolute; allow two ulps there
        assert abs(g - ref) <= max(1e-12, 2 * np.spacing(abs(ref)))


def test_log_gamma_recurrence():
    xs = np.round(np.arange(1, 101) * 0.1, 10)
    assert np.max(np.abs(log_gamma(xs + 1) - log_gamma(xs) - np.log(xs))) <= 1e-12


def test_log_gamma_domain():
    with pytest.raises(ValueError):
        log_gamma(0.0)
    with pytest.raises(ValueError):
        log_gamma(np.array([1.0, -2.0]))


def test_digamma_known_values():
    assert digamma(1.0) == pytest.approx(-EULER, abs=1e-12)
    assert digamma(0.5) == pytest.approx(-EULER - 2 * math.log(2), abs=1e-12)
    assert digamma(2.0) == pytest.approx(1 - EULER, abs=1e-12)


def test_digamma_against_mpmath():
    xs = np.geomspace(1e-2, 1e4, 60)
    got = digamma(xs)
    for x, g in zip(xs, got):
        assert abs(g - float(mpmath.digamma(mpmath.mpf(float(x))))) <= 1e-10


def test_digamma_matches_log_gamma_differences():
    xs = np.round(np.arange(1, 101) * 0.1, 10)
    h = 1e-5
    fd = (log_gamma(xs + h) - log_gamma(xs - h)) / (2 * h)
    assert np.max(np.abs(fd - digamma(xs))) <= 1e-6


def test_digamma_domain():
    with pytest.raises(ValueError):
        digamma(-1.0)


def test_gauss_legendre_small_rules():
    r1 = gauss_legendre(1, -1, 1)
    assert r1.nodes.tolist() == pytest.approx([0.0])
    assert r1.weights.tolist() == pytest.approx([2.0])
    r2 = gauss_legendre(2, -1, 1)
    s = 1 / math.sqrt(3)
    assert r2.nodes.tolist() == pytest.approx([-s, s], abs=1e-15)
    assert r2.weights.tolist() == pytest.approx([1.0, 1.0], abs=1e-15)
    assert gauss_legendre(2, 0, 1).integrate(lambda x: x**3) == pytest.approx(0.25, rel=1e-14)


@pytest.mark.parametrize("order", [1, 2, 5, 10, 15, 30])
def test_gauss_legendre_rule_invariants(order):
    r = gauss_legendre(order, 0.0, 3.0)
    assert r.order == order
    assert np.all(r.weights > 0)
    assert np.all(np.diff(r.nodes) > 0)
    assert np.all((r.nodes > 0.0) & (r.nodes < 3.0))
    assert r.weights.sum() == pytest.approx(3.0, rel=1e-12)


@pytest.mark.parametrize("order", [1, 3, 8, 15])
def test_gauss_legendre_monomials_exact(order):
    r = gauss_legendre(order, 0.0, 1.0)
    for k in range(2 * order):
        assert r.integrate(lambda x: x**k) == pytest.approx(1.0 / (k + 1), rel=1e-12)


@settings(max_examples=50, deadline=None)
@given(
    a=st.floats(-5, 5),
    width=st.floats(0.1, 10),
    order=st.integers(1, 12),
    coeffs=st.lists(st.floats(-3, 3), min_size=1, max_size=24),
)
def test_gauss_legendre_polynomial_exactness(a, width, order, coeffs):
    coeffs = coeffs[: 2 * order]
    b = a + width
    p = np.polynomial.Polynomial(coeffs)
    exact = p.integ()(b) - p.integ()(a)
    got = gauss_legendre(order, a, b).integrate(p)
    scale = sum(abs(c) for c in coeffs) * max(1.0, abs(a), abs(b)) ** len(coeffs) * width
    assert abs(got - exact) <= 1e-12 * scale


def test_gauss_legendre_preconditions():
    with pytest.raises(ValueError):
        gauss_legendre(0, 0, 1)
    with pytest.raises(ValueError):
        gauss_legendre(3, 1, 1)


def test_adaptive_quad_smooth_and_singular():
    val, err = adaptive_quad(np.sin, 0.0, math.pi, abs_tol=1e-13, rel_tol=1e-13)
    assert val == pytest.approx(2.0, abs=1e-12)
    assert err <= 1e-12
    # integrable endpoint singularity
    val, _ = adaptive_quad(lambda x: x**-0.5, 0.0, 1.0, abs_tol=1e-9, rel_tol=1e-9)
    assert val == pytest.approx(2.0, abs=1e-7)


def test_adaptive_quad_reports_failure():
    with pytest.raises(IntegrationError):
        adaptive_quad(lambda x: np.sin(1.0 / x), 1e-9, 1.0, abs_tol=1e-15, rel_tol=1e-15, max_panels=20)


def test_rng_determinism():
    a, b = RngStream(42), RngStream(42)
    assert [rng_uniform(a) for _ in range(1000)] == [rng_uniform(b) for _ in range(1000)]
    assert np.array_equal(RngStream(7).gaussian(100), RngStream(7).gaussian(100))
    assert not np.array_equal(RngStream(7).gaussian(100), RngStream(8).gaussian(100))


def test_rng_children_are_distinct_and_reproducible():
    root = RngStream(3)
    c0, c1 = root.child(0).uniform(50), root.child(1).uniform(50)
    assert not np.array_equal(c0, c1)
    assert np.array_equal(c0, RngStream(3).child(0).uniform(50))


def test_rng_moments():
    n = 1_000_000
    g = RngStream(11).gaussian(n)
    u = RngStream(12).uniform(n)
    assert abs(g.mean()) <= 4 / math.sqrt(n)
    assert abs(u.mean() - 0.5) <= 4 * (1 / math.sqrt(12)) / math.sqrt(n)
    assert np.all((u >= 0) & (u < 1))


def test_rng_scalar_helpers_and_integers():
    s = RngStream(5)
    assert isinstance(rng_gaussian(s), float)
    ints = RngStream(5).integers(2, 9, 1000)
    assert ints.min() >= 2 and ints.max() <= 8
    perm = RngStream(5).permutation(20)
    assert sorted(perm.tolist()) == list(range(20))
