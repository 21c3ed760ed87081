"""Keyed linear-attention retrieval with fractional decay.

Positive random features ``phi`` make ``phi(q) . phi(k)`` an unbiased
estimate of ``exp(q . k / sqrt(d_k))``. Per bank and exponential term the
accumulators

    G <- r_s G + c_s [bank == k] phi(k_t) v_t^T,     b <- r_s b + c_s [bank == k] phi(k_t)

give the output ``sum phi(q)^T G / (sum phi(q)^T b + eps0)`` in
O(K S d_phi d_v) per step.

Clock convention: a query at position ``t`` sees tokens ``i < t`` with
weight ``w_hat(t - i)``. The accumulator is ticked to ``t`` (pure decay),
queried, and only then is token ``t`` added.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from vort.banks import BankKernel
from vort.numerics import RngStream

DEFAULT_EPS0 = 1e-6


@dataclass(frozen=True)
class FeatureMap:
    projection: np.ndarray  # (d_phi, d_k)
    seed: int

    @property
    def d_phi(self) -> int:
        return self.projection.shape[0]

    @property
    def d_k(self) -> int:
        return self.projection.shape[1]

    def __call__(self, x) -> np.ndarray:
        return feature_map_apply(self, x)


def make_feature_map(d_k: int, d_phi: int, seed: int) -> FeatureMap:
    proj = RngStream(seed).gaussian((d_phi, d_k))
    proj.setflags(write=False)
    return FeatureMap(proj, seed)


def feature_map_apply(fm: FeatureMap, x) -> np.ndarray:
    """``phi(x)_r = exp(omega_r . x~ - |x~|^2 / 2) / sqrt(d_phi)`` with ``x~ = x / d_k^{1/4}``.

    Accepts a single vector or a stack of row vectors.
    """
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != fm.d_k:
        raise ValueError(f"input dimension {x.shape[-1]} != d_k {fm.d_k}")
    xs = x * fm.d_k ** -0.25
    proj = xs @ fm.projection.T
    sq = 0.5 * np.sum(xs * xs, axis=-1, keepdims=True)
    return np.exp(proj - sq) / np.sqrt(fm.d_phi)


def _flatten_terms(kernels: Sequence[BankKernel]):
    rates = np.concatenate([k.rates for k in kernels])
    coeffs = np.concatenate([k.coeffs for k in kernels])
    owner = np.concatenate([np.full(k.n_terms, b) for b, k in enumerate(kernels, start=1)])
    return rates, coeffs, owner


@dataclass
class RetrievalAccumulators:
    """All ``(k, s)`` accumulators, stored as flat term arrays.

    ``G`` has shape ``(P, d_phi, d_v)`` and ``b`` shape ``(P, d_phi)`` where
    ``P = sum_k S_k``; ``owner[p]`` is the 1-based bank of term ``p``.
    """

    kernels: list[BankKernel]
    fm: FeatureMap
    d_v: int
    eps0: float = DEFAULT_EPS0
    G: np.ndarray = field(init=False)
    b: np.ndarray = field(init=False)
    t: int = 0
    ops: int = 0  # multiply-adds performed so far

    def __post_init__(self):
        self.rates, self.coeffs, self.owner = _flatten_terms(self.kernels)
        P = len(self.rates)
        self.G = np.zeros((P, self.fm.d_phi, self.d_v))
        self.b = np.zeros((P, self.fm.d_phi))

    @property
    def K(self) -> int:
        return len(self.kernels)

    def tick(self) -> None:
        self.G *= self.rates[:, None, None]
        self.b *= self.rates[:, None]
        self.t += 1
        self.ops += self.G.size + self.b.size

    def add(self, key, value, bank_index: int) -> None:
        if not 1 <= bank_index <= self.K:
            raise IndexError(f"bank_index {bank_index} outside [1, {self.K}]")
        value = np.asarray(value, dtype=float)
        if value.shape != (self.d_v,):
            raise ValueError(f"value has shape {value.shape}, expected ({self.d_v},)")
        phi = feature_map_apply(self.fm, key)
        sel = self.owner == bank_index
        c = self.coeffs[sel]
        self.G[sel] += c[:, None, None] * np.outer(phi, value)[None]
        self.b[sel] += c[:, None] * phi[None]
        d_phi = self.fm.d_phi
        # feature map, outer product, and the scaled adds into the routed bank
        self.ops += d_phi * self.fm.d_k + d_phi * self.d_v + len(c) * (d_phi * self.d_v + d_phi)

    def retrieve(self, query) -> np.ndarray:
        phi_q = feature_map_apply(self.fm, query)
        num = phi_q @ self.G.sum(axis=0)
        den = phi_q @ self.b.sum(axis=0) + self.eps0
        self.ops += self.G.size + self.b.size + self.fm.d_phi * (self.fm.d_k + self.d_v + 1)
        return num / den


def accum_step(acc: RetrievalAccumulators, key, value, bank_index: int) -> RetrievalAccumulators:
    """Advance one position: every term decays, the routed bank ingests ``(key, value)``."""
    acc.tick()
    acc.add(key, value, bank_index)
    return acc


def retrieve(acc: RetrievalAccumulators, query, fm: FeatureMap | None = None) -> np.ndarray:
    if fm is not None and fm is not acc.fm:
        raise ValueError("feature map differs from the one the accumulators were built with")
    return acc.retrieve(query)


@dataclass(frozen=True)
class HistoryItem:
    key: np.ndarray
    value: np.ndarray
    bank_index: int
    position: int


def dense_retrieve(
    history: Sequence[HistoryItem],
    query,
    t: int,
    fm: FeatureMap,
    kernels: Sequence[BankKernel],
    eps0: float = DEFAULT_EPS0,
    d_v: int | None = None,
) -> np.ndarray:
    """Direct O(t d_phi d_v) evaluation of the decayed keyed average at time ``t``.

    ``d_v`` is only needed to shape the zero output of an empty history.
    """
    phi_q = feature_map_apply(fm, query)
    if not history:
        if d_v is None:
            raise ValueError("empty history needs d_v")
        return np.zeros(d_v)
    num = None
    den = eps0
    for item in history:
        if item.position >= t:
            raise ValueError("history positions must precede t")
        score = float(phi_q @ feature_map_apply(fm, item.key))
        w = kernels[item.bank_index - 1].weight(t - item.position)
        contrib = score * w * np.asarray(item.value, dtype=float)
        num = contrib if num is None else num + contrib
        den += score * w
    return num / den


def term_weights(rates: np.ndarray, coeffs: np.ndarray, lags: np.ndarray) -> np.ndarray:
    """``sum_s c_s r_s^lag`` broadcast over an array of lags."""
    return rates ** np.asarray(lags, dtype=float)[..., None] @ coeffs


def scan_outputs(
    kernels: Sequence[BankKernel],
    fm: FeatureMap,
    keys: np.ndarray,
    values: np.ndarray,
    banks: np.ndarray,
    query_positions: np.ndarray,
    queries: np.ndarray,
    eps0: float = DEFAULT_EPS0,
) -> np.ndarray:
    """Retrieval outputs at sorted query positions for a whole sequence.

    Runs the same accumulator recurrence as :class:`RetrievalAccumulators`,
    but advances it a segment at a time: between consecutive queries the
    state decays by ``r^gap`` and the segment's tokens are added with their
    accumulated decay in one contraction. The states at query times are
    identical to stepping token by token.
    """
    rates, coeffs, owner = _flatten_terms(kernels)
    P = len(rates)
    d_phi = fm.d_phi
    d_v = values.shape[1]
    phi_k = feature_map_apply(fm, keys)
    phi_q = feature_map_apply(fm, queries)
    G = np.zeros((P, d_phi, d_v))
    b = np.zeros((P, d_phi))
    clock = 0  # state holds tokens < clock, decayed to time `clock`
    out = np.empty((len(query_positions), d_v))
    for qi, t in enumerate(query_positions):
        t = int(t)
        if t < clock:
            raise ValueError("query positions must be sorted")
        gap = t - clock
        decay = rates**gap
        G *= decay[:, None, None]
        b *= decay[:, None]
        if gap:
            seg = slice(clock, t)
            lags = t - np.arange(clock, t)
            # (P, seg) per-term decay, zeroed outside each term's bank
            wts = np.power.outer(rates, lags.astype(float)) * coeffs[:, None]
            wts *= owner[:, None] == banks[seg][None, :]
            G += np.einsum("ps,sf,sv->pfv", wts, phi_k[seg], values[seg], optimize=True)
            b += wts @ phi_k[seg]
        clock = t
        out[qi] = (phi_q[qi] @ G.sum(axis=0)) / (phi_q[qi] @ b.sum(axis=0) + eps0)
    return out
