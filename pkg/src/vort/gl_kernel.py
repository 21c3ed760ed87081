"""Exact Grünwald-Letnikov retention weights.

``w_j = Gamma(j + alpha) / (Gamma(alpha) Gamma(j + 1))`` is the lag-``j``
weight of the fractional sum of order ``alpha``. Everything here is exact
(up to rounding) and serves as ground truth for the exponential-sum
approximations in :mod:`vort.soe`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from vort.numerics import log_gamma


def _check_alpha(alpha: float) -> float:
    alpha = float(alpha)
    if not 0.0 < alpha <= 1.0:
        raise ValueError(f"alpha must lie in (0, 1], got {alpha}")
    return alpha


@dataclass(frozen=True)
class GlWeights:
    alpha: float
    values: np.ndarray

    def __len__(self) -> int:
        return len(self.values)


def gl_weights(alpha: float, J: int) -> GlWeights:
    """Weights ``w_0 .. w_J`` by the recurrence ``w_j = w_{j-1} (j - 1 + alpha) / j``.

    The multiplicative form never forms Gamma(j + alpha) and so does not
    overflow for large ``J``.
    """
    alpha = _check_alpha(alpha)
    if J < 0:
        raise ValueError("J must be nonnegative")
    j = np.arange(1, J + 1, dtype=float)
    values = np.empty(J + 1)
    values[0] = 1.0
    values[1:] = np.cumprod((j - 1.0 + alpha) / j)
    values.setflags(write=False)
    return GlWeights(alpha, values)


def gl_weights_gamma(alpha: float, j) -> np.ndarray:
    """Gamma-ratio form of the weights, via log-gamma differences."""
    alpha = _check_alpha(alpha)
    j = np.asarray(j, dtype=float)
    return np.exp(log_gamma(j + alpha) - log_gamma(alpha) - log_gamma(j + 1.0))


def gl_partial_sum(alpha: float, t: int) -> float:
    """``sum_{j<t} w_j`` in closed form, ``Gamma(t + alpha) / (Gamma(alpha + 1) Gamma(t))``."""
    alpha = _check_alpha(alpha)
    if t < 1:
        raise ValueError("t must be >= 1")
    return math.exp(math.lgamma(t + alpha) - math.lgamma(alpha + 1.0) - math.lgamma(t))


def gl_frequency_response(alpha: float, omega: float) -> float:
    """``|W_alpha(e^{i omega})| = (2 |sin(omega / 2)|)^{-alpha}``."""
    alpha = _check_alpha(alpha)
    if not 0.0 < omega <= math.pi:
        raise ValueError("omega must lie in (0, pi]; the response diverges at 0")
    return (2.0 * abs(math.sin(0.5 * omega))) ** (-alpha)


def gl_generating_function(alpha: float, z: complex) -> complex:
    """Closed form ``(1 - z)^{-alpha}`` of the weight generating series, ``|z| < 1``."""
    alpha = _check_alpha(alpha)
    if abs(z) >= 1:
        raise ValueError("series converges only for |z| < 1")
    return (1.0 - z) ** (-alpha)


def gl_fractional_state(alpha: float, values) -> np.ndarray:
    """Direct convolution ``M_t = sum_{i=1}^t w_{t-i} v_i`` of a value sequence.

    ``values`` has shape ``(t,)`` or ``(t, d)`` with row ``i - 1`` holding
    ``v_i``. Cost is O(t d); calling it at every ``t`` gives the quadratic
    reference path.
    """
    v = np.asarray(values, dtype=float)
    if v.shape[0] == 0:
        raise ValueError("need at least one value")
    w = gl_weights(alpha, v.shape[0] - 1).values
    return w[::-1] @ v
