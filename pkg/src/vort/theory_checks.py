"""Numerical checks of the quantisation bound and the mixture separation bound.

Two kernels appear here: the normalised power law ``k_a(t) = t^{a-1} / Gamma(a)``
and the raw power law ``g_a(t) = t^{a-1}``. A fixed exponential mixture
``f(t) = sum_m pi_m e^{-lambda_m t}`` has finite energy on ``[1, inf)`` while
``g_a`` does not for ``a > 1/2``, so ``int_1^T (f - g_a)^2`` grows like
``N_a(T) = int_1^T t^{2a-2} dt``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from vort.numerics import IntegrationError, RngStream, adaptive_quad, digamma, log_gamma


@dataclass(frozen=True)
class MixtureModel:
    weights: np.ndarray  # pi_m >= 0
    rates: np.ndarray  # lambda_m > 0

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        r = np.asarray(self.rates, dtype=float)
        if w.shape != r.shape or w.ndim != 1:
            raise ValueError("weights and rates must be 1-D arrays of equal length")
        if np.any(w < 0):
            raise ValueError("mixture weights must be nonnegative")
        if np.any(r <= 0):
            raise ValueError("mixture rates must be positive")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "rates", r)

    @property
    def M(self) -> int:
        return len(self.weights)

    @property
    def C_f(self) -> float:
        return float(self.weights.sum())

    @property
    def Lambda(self) -> float:
        return float(self.rates.min())

    def quad_term(self) -> float:
        """``sum_{m,m'} pi_m pi_m' / (lambda_m + lambda_m')`` (equals ``C_f^2 R``)."""
        return float(self.weights @ (1.0 / np.add.outer(self.rates, self.rates)) @ self.weights)

    @property
    def R(self) -> float:
        c = self.C_f
        return self.quad_term() / c**2 if c > 0 else 0.0

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        return np.exp(-np.multiply.outer(t, self.rates)) @ self.weights


@dataclass(frozen=True)
class PowerLawTarget:
    alpha: float

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie in (0, 1)")

    def raw(self, t):
        return np.asarray(t, dtype=float) ** (self.alpha - 1.0)

    def normalized(self, t):
        return self.raw(t) / math.gamma(self.alpha)


def kernel_k(gamma: float, t):
    """``t^{gamma-1} / Gamma(gamma)``."""
    t = np.asarray(t, dtype=float)
    return np.exp((gamma - 1.0) * np.log(t) - log_gamma(gamma))


def n_alpha(alpha: float, T: float) -> float:
    """``int_1^T t^{2 alpha - 2} dt`` in closed form."""
    if not 0.0 < alpha <= 1.0:
        raise ValueError("alpha must lie in (0, 1]")
    if T < 1:
        raise ValueError("T must be >= 1")
    e = 2.0 * alpha - 1.0
    lt = math.log(T)
    # expm1 form stays accurate (and continuous) as alpha -> 1/2
    if abs(e * lt) < 1e-300:
        return lt
    return math.expm1(e * lt) / e


def mixture_l2_error(mix: MixtureModel, alpha: float, T: float) -> float:
    """``int_1^T (f(t) - t^{alpha-1})^2 dt`` by adaptive quadrature in ``u = log t``."""
    if T < 1:
        raise ValueError("T must be >= 1")
    if T == 1:
        return 0.0
    tol = 1e-8 * max(1.0, n_alpha(alpha, T))

    def integrand(u):
        t = np.exp(u)
        d = mix(t) - t ** (alpha - 1.0)
        return d * d * t

    try:
        value, _ = adaptive_quad(integrand, 0.0, math.log(T), abs_tol=tol, rel_tol=1e-13)
    except IntegrationError as exc:
        raise IntegrationError(f"mixture_l2_error(alpha={alpha}, T={T}) did not converge", exc.value, exc.error)
    return value


def separation_lower_bound(mix: MixtureModel, alpha: float, T: float) -> float:
    """``N_alpha(T) - 2 C_f Gamma(alpha) Lambda^{-alpha} - C_f^2 R``."""
    n = n_alpha(alpha, T)
    if mix.C_f == 0:
        return n
    return n - 2.0 * mix.C_f * math.gamma(alpha) * mix.Lambda ** (-alpha) - mix.quad_term()


def cross_term(alpha: float, lam: float, T: float) -> float:
    """``int_1^T e^{-lam t} t^{alpha-1} dt``; bounded above by ``Gamma(alpha) lam^{-alpha}``."""

    def integrand(u):
        t = np.exp(u)
        return np.exp(-lam * t) * t**alpha

    value, _ = adaptive_quad(integrand, 0.0, math.log(T), abs_tol=1e-12, rel_tol=1e-12)
    return value


def sample_mixture(stream: RngStream, max_components: int = 8, lam_lo: float = 0.01, lam_hi: float = 10.0) -> MixtureModel:
    """Random mixture: ``M`` uniform on ``1..max_components``, log-uniform rates, uniform weights."""
    M = int(stream.integers(1, max_components + 1))
    rates = np.exp(np.log(lam_lo) + stream.uniform(M) * (np.log(lam_hi) - np.log(lam_lo)))
    weights = stream.uniform(M)
    return MixtureModel(weights, rates)


@dataclass(frozen=True)
class CheckResult:
    name: str
    params: dict
    lhs: float
    rhs: float
    passed: bool

    def to_dict(self) -> dict:
        return {"name": self.name, "params": self.params, "lhs": self.lhs, "rhs": self.rhs, "pass": self.passed}


def separation_sweep(
    n_mixtures: int = 200,
    alphas=(0.55, 0.7, 0.9),
    horizons=(1e2, 1e3, 1e4),
    seed: int = 0,
) -> list[CheckResult]:
    """``mixture_l2_error >= separation_lower_bound`` over random mixtures and a grid of ``(alpha, T)``."""
    root = RngStream(seed)
    out = []
    for i in range(n_mixtures):
        mix = sample_mixture(root.child(i))
        for a in alphas:
            for T in horizons:
                lhs = mixture_l2_error(mix, a, T)
                rhs = separation_lower_bound(mix, a, T)
                # quadrature tolerance is the only slack allowed
                ok = lhs >= rhs - 1e-8 * max(1.0, n_alpha(a, T))
                out.append(CheckResult("separation", {"mixture": i, "M": mix.M, "alpha": a, "T": T}, lhs, rhs, ok))
    return out


def floor_check(mix: MixtureModel, alpha: float, T: float) -> CheckResult:
    """For ``alpha < 1/2``: error is at least ``1/(1 - 2 alpha) - 2 C_f Gamma(alpha) Lambda^{-alpha} - C_f^2 R``."""
    if not alpha < 0.5:
        raise ValueError("floor applies only for alpha < 1/2")
    floor = 1.0 / (1.0 - 2.0 * alpha)
    if mix.C_f > 0:
        floor -= 2.0 * mix.C_f * math.gamma(alpha) * mix.Lambda ** (-alpha) + mix.quad_term()
    lhs = mixture_l2_error(mix, alpha, T)
    return CheckResult("floor", {"alpha": alpha, "T": T}, lhs, floor, floor <= 0 or lhs >= floor)


def divergence_check(mix: MixtureModel, alpha: float, horizons=(1e3, 1e4, 1e5)) -> CheckResult:
    """Error of a fixed mixture at growing horizons: strictly increasing, last more than twice the first."""
    errs = [mixture_l2_error(mix, alpha, T) for T in horizons]
    increasing = all(b > a for a, b in zip(errs, errs[1:]))
    return CheckResult(
        "divergence",
        {"alpha": alpha, "T": list(horizons), "errors": errs},
        errs[-1],
        2.0 * errs[0],
        increasing and errs[-1] > 2.0 * errs[0],
    )


def sup_abs_digamma(delta: float, points: int = 100) -> float:
    grid = np.linspace(delta, 1.0, points)
    return float(np.max(np.abs(digamma(grid))))


def quantisation_bound_check(alpha: float, beta: float, t: float, delta: float) -> tuple[float, float, bool]:
    """``|k_beta(t) - k_alpha(t)| <= (Delta t^{beta-1} / Gamma(beta)) (|log t| + sup_[delta,1] |psi|)``."""
    if not alpha < beta:
        raise ValueError("need alpha < beta")
    if not (delta <= alpha and beta <= 1.0):
        raise ValueError("need delta <= alpha < beta <= 1")
    if t < 1:
        raise ValueError("t must be >= 1")
    lhs = abs(float(kernel_k(beta, t)) - float(kernel_k(alpha, t)))
    rhs = (beta - alpha) * float(kernel_k(beta, t)) * (abs(math.log(t)) + sup_abs_digamma(delta))
    return lhs, rhs, lhs <= rhs


def quantisation_sweep(delta: float = 0.1, n_orders: int = 20, n_times: int = 10, t_max: float = 1e4) -> list[CheckResult]:
    """Bound check on every ordered pair of a ``n_orders x n_orders`` order grid times ``n_times`` lags."""
    orders = np.linspace(delta, 1.0, n_orders)
    times = np.geomspace(1.0, t_max, n_times)
    out = []
    for a in orders:
        for b in orders:
            for t in times:
                params = {"alpha": float(a), "beta": float(b), "t": float(t), "delta": delta}
                if a == b:
                    out.append(CheckResult("quantisation", params, 0.0, 0.0, True))
                    continue
                lo, hi = (a, b) if a < b else (b, a)
                lhs, rhs, ok = quantisation_bound_check(float(lo), float(hi), float(t), delta)
                out.append(CheckResult("quantisation", params, lhs, rhs, ok))
    return out


def quantisation_grid_error(delta: float, K: int, t: float, points: int = 20001) -> float:
    """``sup_alpha |k_alpha(t) - k_{alpha_k*}(t)|`` over a fine order grid on ``[delta, 1]``."""
    if K < 1:
        raise ValueError("K must be >= 1")
    if t < 1:
        raise ValueError("t must be >= 1")
    alphas = np.linspace(delta, 1.0, points)
    # nearest grid order delta + (1 - delta) k / K, k = 1..K, ties to the larger
    pos = (alphas - delta) * K / (1.0 - delta)
    k = np.clip(np.floor(pos + 0.5), 1, K)
    banks = delta + (1.0 - delta) * k / K
    return float(np.max(np.abs(kernel_k(alphas, t) - kernel_k(banks, t))))


def near_zero_ratios(t: float, alphas=(1e-2, 1e-3, 1e-4)) -> np.ndarray:
    """``k_alpha(t) / (alpha / t)`` for small orders; tends to 1."""
    if t < 1:
        raise ValueError("t must be >= 1")
    a = np.asarray(alphas, dtype=float)
    return kernel_k(a, t) * t / a


def near_zero_limit_check(t: float) -> bool:
    """True when the ratio at ``alpha = 1e-4`` is within 1% of 1."""
    return bool(abs(near_zero_ratios(t)[-1] - 1.0) <= 0.01)
