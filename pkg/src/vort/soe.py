"""Sum-of-exponentials approximation of the Grünwald-Letnikov kernel.

The weights have the Laplace representation

    w_j = \\int_0^\\infty e^{-lambda j} p_alpha(lambda) d lambda,
    p_alpha(lambda) = e^{-alpha lambda} (1 - e^{-lambda})^{-alpha} / (Gamma(alpha) Gamma(1 - alpha)).

Substituting ``u = log(lambda / lambda_min)`` and applying an S-point
Gauss-Legendre rule on ``[0, L]`` gives

    w_j ~= sum_s c_s r_s^j,   r_s = e^{-xi_s},   c_s = omega_s xi_s p_alpha(xi_s),

where ``xi_s = lambda_min e^{u_s}`` and ``xi_s`` is the Jacobian of the
substitution. Every term is a geometric sequence, so a fractional state can
be advanced with S one-step recurrences.

:func:`rho` is the density with an extra ``e^{-lambda}`` factor,
``rho = p_alpha e^{-lambda}``. Its moments are the weights shifted by one lag
(``int e^{-lambda j} rho = w_{j+1}``), so the construction uses
:func:`laplace_density` instead.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from vort.gl_kernel import gl_weights
from vort.numerics import IntegrationError, adaptive_quad, digamma, gauss_legendre, log_gamma

MAX_TERMS = 256


class SoeCertificationError(RuntimeError):
    def __init__(self, alpha: float, horizon: int, target_eps: float, n_terms: int, achieved: float):
        super().__init__(
            f"could not certify alpha={alpha}, T={horizon} to eps={target_eps:g} "
            f"with S <= {n_terms}; best achieved error {achieved:.3e}"
        )
        self.achieved = achieved
        self.n_terms = n_terms


def _check_open_alpha(alpha: float) -> float:
    alpha = float(alpha)
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in the open interval (0, 1), got {alpha}")
    return alpha


def _log_beta_norm(alpha: float) -> float:
    return log_gamma(alpha) + log_gamma(1.0 - alpha)


def laplace_density(alpha: float, lam):
    """Density whose ``j``-th Laplace moment is ``w_j`` (including ``w_0 = 1``)."""
    alpha = _check_open_alpha(alpha)
    lam = np.asarray(lam, dtype=float)
    if np.any(lam <= 0):
        raise ValueError("lambda must be positive")
    # (1 - e^{-lam})^{-alpha} through expm1 to keep precision as lam -> 0
    log_p = -alpha * lam - alpha * np.log(-np.expm1(-lam)) - _log_beta_norm(alpha)
    out = np.exp(log_p)
    return float(out) if out.ndim == 0 else out


def rho(alpha: float, lam):
    """``e^{-alpha lam} (1 - e^{-lam})^{-alpha} e^{-lam} / (Gamma(alpha) Gamma(1 - alpha))``."""
    lam_arr = np.asarray(lam, dtype=float)
    out = laplace_density(alpha, lam_arr) * np.exp(-lam_arr)
    return float(out) if np.ndim(out) == 0 else out


def moment_oracle(alpha: float, j: int, tol: float = 1e-10) -> float:
    """``int_0^inf e^{-lambda j} p_alpha(lambda) d lambda`` by adaptive quadrature.

    The integral is taken in ``u = log(lambda)`` where the integrand is smooth;
    the range is cut where both tails fall below ``1e-3 * tol``.
    """
    alpha = _check_open_alpha(alpha)
    if j < 0:
        raise ValueError("j must be nonnegative")
    log_norm = _log_beta_norm(alpha)
    tail = 1e-3 * tol
    # lower tail ~ lam^{1-alpha} / ((1-alpha) B); upper tail ~ e^{-(j+alpha) lam} / ((j+alpha) B)
    u_lo = (math.log(tail * (1.0 - alpha)) + log_norm) / (1.0 - alpha)
    lam_hi = (-math.log(tail) + 1.0) / (j + alpha)
    u_hi = math.log(lam_hi)

    def integrand(u: np.ndarray) -> np.ndarray:
        lam = np.exp(u)
        return np.exp(-lam * j + u) * laplace_density(alpha, lam)

    try:
        value, _ = adaptive_quad(integrand, u_lo, u_hi, abs_tol=1e-3 * tol, rel_tol=1e-14)
    except IntegrationError as exc:
        raise IntegrationError(f"moment_oracle(alpha={alpha}, j={j}) did not converge", exc.value, exc.error)
    return value


@dataclass(frozen=True)
class SoeApprox:
    """Certified S-term exponential representation of one order's kernel."""

    alpha: float
    horizon: int
    target_eps: float
    xi: np.ndarray
    omega: np.ndarray
    rates: np.ndarray
    coeffs: np.ndarray
    lambda_min: float
    lambda_max: float
    log_width: float
    certified_error: float

    @property
    def n_terms(self) -> int:
        return len(self.rates)

    # short aliases matching the usual notation
    @property
    def S(self) -> int:
        return self.n_terms

    @property
    def L(self) -> float:
        return self.log_width


def soe_nodes(horizon: int, target_eps: float, n_terms: int):
    """Quadrature nodes ``xi_s`` and weights ``omega_s`` (on the log scale).

    The nodes depend only on the horizon, the accuracy and the term count,
    never on ``alpha``.
    """
    if horizon < 2:
        raise ValueError("horizon must be >= 2")
    if not 0.0 < target_eps < 1.0:
        raise ValueError("target_eps must lie in (0, 1)")
    lam_min = target_eps / (2.0 * horizon)
    lam_max = 2.0 * math.log(2.0 * horizon / target_eps)
    width = math.log(lam_max / lam_min)
    rule = gauss_legendre(n_terms, 0.0, width)
    xi = lam_min * np.exp(rule.nodes)
    return xi, np.array(rule.weights), lam_min, lam_max, width


def _soe_values(xi: np.ndarray, coeffs: np.ndarray, j) -> np.ndarray:
    j = np.asarray(j, dtype=float)
    return np.exp(-np.multiply.outer(j, xi)) @ coeffs


def _assemble(alpha: float, horizon: int, target_eps: float, n_terms: int, exact: np.ndarray) -> SoeApprox:
    xi, omega, lam_min, lam_max, width = soe_nodes(horizon, target_eps, n_terms)
    coeffs = omega * xi * laplace_density(alpha, xi)
    rates = np.exp(-xi)
    if np.any(rates >= 1.0):
        raise ValueError("smallest node underflows: rate rounds to 1; increase target_eps or reduce horizon")
    err = float(np.max(np.abs(_soe_values(xi, coeffs, np.arange(horizon + 1)) - exact)))
    for arr in (xi, omega, rates, coeffs):
        arr.setflags(write=False)
    return SoeApprox(
        alpha=alpha,
        horizon=int(horizon),
        target_eps=float(target_eps),
        xi=xi,
        omega=omega,
        rates=rates,
        coeffs=coeffs,
        lambda_min=lam_min,
        lambda_max=lam_max,
        log_width=width,
        certified_error=err,
    )


def build_soe(
    alpha: float,
    horizon: int,
    target_eps: float = 1e-3,
    n_terms: int | None = None,
    max_terms: int = MAX_TERMS,
) -> SoeApprox:
    """Build the exponential-sum kernel for ``alpha`` on lags ``0..horizon``.

    With ``n_terms`` given, that many terms are used and the achieved error is
    recorded but not enforced. Otherwise the smallest ``S <= max_terms`` whose
    exact error sweep is within ``target_eps`` is returned.
    """
    alpha = _check_open_alpha(alpha)
    exact = gl_weights(alpha, horizon).values
    if n_terms is not None:
        if n_terms < 1:
            raise ValueError("n_terms must be >= 1")
        return _assemble(alpha, horizon, target_eps, n_terms, exact)
    best = math.inf
    for S in range(1, max_terms + 1):
        approx = _assemble(alpha, horizon, target_eps, S, exact)
        if approx.certified_error <= target_eps:
            return approx
        best = min(best, approx.certified_error)
    raise SoeCertificationError(alpha, horizon, target_eps, max_terms, best)


def soe_weight(approx: SoeApprox, j):
    """``sum_s c_s r_s^j`` for integer lag(s) ``j``."""
    out = _soe_values(approx.xi, approx.coeffs, j)
    return float(out) if np.ndim(out) == 0 else out


def soe_certified_error(approx: SoeApprox) -> float:
    """Exact sweep of ``|w_hat_j - w_j|`` over ``j = 0..T``."""
    exact = gl_weights(approx.alpha, approx.horizon).values
    return float(np.max(np.abs(soe_weight(approx, np.arange(approx.horizon + 1)) - exact)))


def density_log_alpha_grad(alpha: float, xi) -> np.ndarray:
    """``d log p_alpha(xi) / d alpha``."""
    alpha = _check_open_alpha(alpha)
    xi = np.asarray(xi, dtype=float)
    return -xi - np.log(-np.expm1(-xi)) - digamma(alpha) + digamma(1.0 - alpha)


def soe_coeff_alpha_grad(approx: SoeApprox) -> np.ndarray:
    """``d c_s / d alpha`` with nodes held fixed (they do not depend on alpha)."""
    return approx.coeffs * density_log_alpha_grad(approx.alpha, approx.xi)


def soe_alpha_grad(approx: SoeApprox, j):
    """``d w_hat_j / d alpha`` for lag(s) ``j``; rates carry no alpha dependence."""
    out = _soe_values(approx.xi, soe_coeff_alpha_grad(approx), j)
    return float(out) if np.ndim(out) == 0 else out
