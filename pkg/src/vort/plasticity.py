"""Retrieval-feedback refinement of fractional orders.

For a trace of keys and queries with known source tokens, the score of
token ``i`` at query ``t`` is ``r_it = exp(q_t . k_i / sqrt(d_k)) w_hat(t - i; alpha_i)``
and the loss is ``-sum_t log p_{i*(t), t}`` with ``p_it = r_it / sum_{i' < t} r_i't``.
Scores are exact exponentials; the kernel is the exponential-sum kernel, so
the order gradient flows through the coefficients ``c_s(alpha)`` (the rates
do not depend on ``alpha``).

The descent driver is projected gradient descent on ``[delta, 1]``.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.special import logsumexp

from vort.numerics import RngStream
from vort.soe import density_log_alpha_grad, laplace_density, soe_nodes


class PlasticityError(RuntimeError):
    """Descent hit a non-finite objective or gradient; ``history`` holds the iterates so far."""

    def __init__(self, message: str, history: "DescentHistory"):
        super().__init__(message)
        self.history = history


@dataclass(frozen=True)
class SoeFamily:
    """Exponential-sum kernels for any order on one fixed node set.

    The quadrature nodes depend only on ``(horizon, eps, n_terms)``, so a
    change of order only changes the coefficients. ``alpha = 1`` is the
    running sum (weight 1 at every lag, no SOE term).
    """

    horizon: int
    eps: float = 1e-3
    n_terms: int = 15
    xi: np.ndarray = field(init=False, repr=False)
    omega: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        xi, omega, *_ = soe_nodes(self.horizon, self.eps, self.n_terms)
        object.__setattr__(self, "xi", xi)
        object.__setattr__(self, "omega", omega)

    def coeffs(self, alpha: float) -> np.ndarray:
        return self.omega * self.xi * laplace_density(alpha, self.xi)

    def coeff_grads(self, alpha: float) -> np.ndarray:
        return self.coeffs(alpha) * density_log_alpha_grad(alpha, self.xi)

    def _per_token(self, alphas: np.ndarray):
        """Coefficient and coefficient-gradient rows, one per token; running-sum tokens flagged."""
        alphas = np.asarray(alphas, dtype=float)
        full = alphas >= 1.0
        C = np.zeros((len(alphas), self.n_terms))
        dC = np.zeros_like(C)
        for a in np.unique(alphas[~full]):
            sel = alphas == a
            C[sel] = self.coeffs(a)
            dC[sel] = self.coeff_grads(a)
        return C, dC, full


@dataclass(frozen=True)
class RetrievalTrace:
    """Keys for every position plus queries with their ground-truth sources."""

    keys: np.ndarray  # (n, d_k)
    query_positions: np.ndarray  # (Q,)
    queries: np.ndarray  # (Q, d_k)
    sources: np.ndarray  # (Q,)

    def __post_init__(self):
        pos = np.asarray(self.query_positions)
        src = np.asarray(self.sources)
        if pos.shape != src.shape or len(pos) != len(self.queries):
            raise ValueError("query_positions, queries and sources must have matching lengths")
        if np.any(src < 0) or np.any(src >= pos):
            raise ValueError("every query needs a ground-truth source i*(t) < t")
        if np.any(pos > len(self.keys)):
            raise ValueError("query position beyond the end of the trace")

    @property
    def n(self) -> int:
        return len(self.keys)

    @property
    def d_k(self) -> int:
        return self.keys.shape[1]


def _pair_terms(trace: RetrievalTrace, family: SoeFamily, alphas):
    """Per-query arrays over candidates ``i < t``: log weights, scores and kernel pieces."""
    alphas = np.asarray(alphas, dtype=float)
    if alphas.shape != (trace.n,):
        raise ValueError(f"need one order per token, got shape {alphas.shape}")
    if np.any(alphas <= 0) or np.any(alphas > 1):
        raise ValueError("orders must lie in (0, 1]")
    C, dC, full = family._per_token(alphas)
    scale = 1.0 / math.sqrt(trace.d_k)
    logits_all = trace.queries @ trace.keys.T * scale  # (Q, n)
    rows = []
    for q, t in enumerate(np.asarray(trace.query_positions)):
        t = int(t)
        idx = np.arange(t)
        lags = (t - idx).astype(float)
        powers = np.exp(-np.multiply.outer(lags, family.xi))  # (t, S)
        w = np.einsum("is,is->i", powers, C[:t])
        dw = np.einsum("is,is->i", powers, dC[:t])
        w[full[:t]] = 1.0
        dw[full[:t]] = 0.0
        rows.append((idx, logits_all[q, :t], w, dw))
    return rows


def retrieval_loss(trace: RetrievalTrace, alphas, family: SoeFamily) -> float:
    """``-sum_t log p_{i*(t), t}`` with exact exponential scores."""
    total = 0.0
    for (idx, logit, w, _), src in zip(_pair_terms(trace, family, alphas), trace.sources):
        log_r = logit + np.log(w)
        total -= log_r[int(src)] - logsumexp(log_r)
    return float(total)


def loss_alpha_grads(trace: RetrievalTrace, alphas, family: SoeFamily) -> np.ndarray:
    """Gradient of :func:`retrieval_loss` with respect to every token's order.

    ``d L / d alpha_i = sum_t (p_it - [i = i*(t)]) d log w_hat(t - i) / d alpha_i``,
    coupling every candidate through the full normaliser. Running-sum tokens
    (``alpha = 1``) get gradient 0; see :func:`boundary_flags`.
    """
    grad = np.zeros(trace.n)
    for (idx, logit, w, dw), src in zip(_pair_terms(trace, family, alphas), trace.sources):
        log_r = logit + np.log(w)
        p = np.exp(log_r - logsumexp(log_r))
        p[int(src)] -= 1.0
        grad[idx] += p * dw / w
    return grad


def loss_alpha_grad(trace: RetrievalTrace, alphas, family: SoeFamily, i: int) -> float:
    return float(loss_alpha_grads(trace, alphas, family)[i])


def boundary_flags(alphas, delta: float) -> np.ndarray:
    """Tokens whose order sits on the projection boundary, where the gradient is one-sided."""
    alphas = np.asarray(alphas, dtype=float)
    return (alphas <= delta) | (alphas >= 1.0)


def shared_order_objective(trace: RetrievalTrace, family: SoeFamily) -> Callable[[float], tuple[float, float]]:
    """Scalar objective ``F(alpha)`` with every token at the same order, returning ``(F, F')``."""

    def F(alpha: float) -> tuple[float, float]:
        alphas = np.full(trace.n, float(alpha))
        return retrieval_loss(trace, alphas, family), float(loss_alpha_grads(trace, alphas, family).sum())

    return F


def make_planted_trace(
    n: int,
    d_k: int,
    n_queries: int,
    seed: int,
    match_strength: float = 2.0,
    short_lag: int = 3,
    long_lag_frac: float = 0.8,
) -> RetrievalTrace:
    """Random keys with queries aimed at planted sources.

    Half of the queries point at a source a few tokens back and half at a
    source far back, so a fast-decaying kernel helps the first group and a
    slow one the second. The shared-order loss then has an interior minimum.
    """
    if n < 4 * short_lag:
        raise ValueError("trace too short for the planted lags")
    rng = RngStream(seed)
    keys = rng.gaussian((n, d_k))
    positions = np.sort(rng.choice(np.arange(n // 2, n + 1), size=n_queries, replace=False))
    sources = np.empty(n_queries, dtype=int)
    for q, t in enumerate(positions):
        if q % 2 == 0:
            sources[q] = t - 1 - int(rng.integers(0, short_lag))
        else:
            sources[q] = int(rng.integers(0, max(1, int((1.0 - long_lag_frac) * t))))
    noise = 0.3 * rng.gaussian((n_queries, d_k))
    # q . k / sqrt(d_k) ~ match_strength for the planted source
    queries = match_strength * keys[sources] / math.sqrt(d_k) + noise
    return RetrievalTrace(keys, positions, queries, sources)


@dataclass(frozen=True)
class PlasticityConfig:
    eta: float
    iterations: int
    delta: float = 0.1
    L_hat: float | None = None
    mu_hat: float | None = None

    def __post_init__(self):
        if not self.eta > 0:
            raise ValueError("eta must be positive")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if not 0.0 < self.delta < 1.0:
            raise ValueError("delta must lie in (0, 1)")
        if self.L_hat is not None and self.eta > 1.0 / self.L_hat * (1 + 1e-12):
            raise ValueError(f"eta={self.eta} exceeds 1/L_hat={1.0 / self.L_hat}")


@dataclass
class DescentHistory:
    alphas: list[float] = field(default_factory=list)
    values: list[float] = field(default_factory=list)
    grads: list[float] = field(default_factory=list)

    def as_arrays(self):
        return np.array(self.alphas), np.array(self.values), np.array(self.grads)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["l", "alpha", "F", "abs_grad"])
        for l, (a, f, g) in enumerate(zip(self.alphas, self.values, self.grads)):
            writer.writerow([l, repr(a), repr(f), repr(abs(g))])
        return buf.getvalue()


def plasticity_descent(F: Callable[[float], tuple[float, float]], alpha0: float, cfg: PlasticityConfig) -> DescentHistory:
    """``alpha <- clip(alpha - eta F'(alpha), delta, 1)`` for ``cfg.iterations`` steps.

    The history holds ``iterations + 1`` entries, starting with ``alpha0``.
    """
    if not cfg.delta <= alpha0 <= 1.0:
        raise ValueError(f"alpha0={alpha0} outside [{cfg.delta}, 1]")
    hist = DescentHistory()
    alpha = float(alpha0)
    for _ in range(cfg.iterations + 1):
        value, grad = F(alpha)
        hist.alphas.append(alpha)
        hist.values.append(float(value))
        hist.grads.append(float(grad))
        if not (math.isfinite(value) and math.isfinite(grad)):
            raise PlasticityError(f"non-finite objective or gradient at alpha={alpha!r}", hist)
        if len(hist.alphas) > cfg.iterations:
            break
        alpha = min(1.0, max(cfg.delta, alpha - cfg.eta * grad))
    return hist


def estimate_smoothness(F: Callable[[float], tuple[float, float]], lo: float, hi: float, points: int = 50) -> float:
    """Largest ``|F''|`` from second differences of ``F`` on an even grid."""
    grid = np.linspace(lo, hi, points)
    vals = np.array([F(a)[0] for a in grid])
    h = grid[1] - grid[0]
    return float(np.max(np.abs(np.diff(vals, 2))) / h**2)


def pl_envelope(values, f_star: float, eta: float, mu: float) -> np.ndarray:
    """``(1 - eta mu)^l (F_0 - F*)`` for each iterate ``l``."""
    values = np.asarray(values, dtype=float)
    l = np.arange(len(values))
    return (1.0 - eta * mu) ** l * (values[0] - f_star)


def descent_inequality_slack(hist: DescentHistory, eta: float, L: float) -> np.ndarray:
    """``F_l - eta (1 - eta L / 2) |F'_l|^2 - F_{l+1}``; nonnegative where the descent lemma holds.

    Only meaningful for steps that were not clipped by the projection.
    """
    _, F, g = hist.as_arrays()
    return F[:-1] - eta * (1.0 - 0.5 * eta * L) * g[:-1] ** 2 - F[1:]


def local_pl_ratios(hist: DescentHistory, tail_frac: float = 0.8) -> np.ndarray:
    """``|F'|^2 / (F - F_min)`` over the last ``tail_frac`` of iterates, skipping exact minima."""
    _, F, g = hist.as_arrays()
    start = int(round((1.0 - tail_frac) * len(F)))
    gap = F[start:] - F.min()
    keep = gap > 0
    return g[start:][keep] ** 2 / gap[keep]
