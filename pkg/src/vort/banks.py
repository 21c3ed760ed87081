"""Per-token fractional routing and K fixed-order memory banks.

Each token gets an order ``alpha_i = delta + (1 - delta) sigmoid(W [x; H; e] + b)``
and is routed to the bank whose grid order ``alpha_k = delta + (1 - delta) k / K``
is nearest. Bank ``k`` keeps one value accumulator per exponential term.
Banks are numbered ``1..K`` as in the routing formula.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from vort.gl_kernel import gl_weights
from vort.soe import SoeApprox, build_soe

SNAPSHOT_VERSION = 1


@dataclass(frozen=True)
class RoutingConfig:
    delta: float
    K: int
    weights: np.ndarray
    bias: float = 0.0

    def __post_init__(self):
        if not 0.0 < self.delta < 1.0:
            raise ValueError("delta must lie in (0, 1)")
        if self.K < 1:
            raise ValueError("K must be >= 1")
        object.__setattr__(self, "weights", np.asarray(self.weights, dtype=float))

    @property
    def orders(self) -> np.ndarray:
        """Bank orders ``alpha_1 < ... < alpha_K = 1``."""
        k = np.arange(1, self.K + 1)
        return self.delta + (1.0 - self.delta) * k / self.K


@dataclass(frozen=True)
class TokenFeatures:
    embedding: np.ndarray
    entropy: float = 0.0
    entity_flag: int = 0

    def __post_init__(self):
        if self.entropy < 0:
            raise ValueError("entropy must be nonnegative")
        if self.entity_flag not in (0, 1):
            raise ValueError("entity_flag must be 0 or 1")

    def vector(self) -> np.ndarray:
        return np.concatenate([np.asarray(self.embedding, dtype=float), [self.entropy, self.entity_flag]])


def attention_entropy(row) -> float:
    """Shannon entropy (natural log) of one attention distribution."""
    p = np.asarray(row, dtype=float)
    p = p[p > 0]
    return float(-np.sum(p * np.log(p)))


def routing_orders(features: np.ndarray, cfg: RoutingConfig) -> np.ndarray:
    """Continuous orders for a batch of routing feature rows ``[x; H; e]``."""
    features = np.atleast_2d(features)
    if features.shape[-1] != cfg.weights.shape[0]:
        raise ValueError(f"feature length {features.shape[-1]} != weight length {cfg.weights.shape[0]}")
    return cfg.delta + (1.0 - cfg.delta) * expit(features @ cfg.weights + cfg.bias)


def nearest_bank(alpha, cfg: RoutingConfig):
    """1-based index of the nearest bank order; ties go to the larger order."""
    alpha = np.asarray(alpha, dtype=float)
    # position on the grid in units of the spacing; bank k sits at k
    pos = (alpha - cfg.delta) * cfg.K / (1.0 - cfg.delta)
    k = np.floor(pos + 0.5).astype(int)
    k = np.clip(k, 1, cfg.K)
    return int(k) if k.ndim == 0 else k


def assign_order(features: TokenFeatures, cfg: RoutingConfig) -> tuple[float, int]:
    alpha = float(routing_orders(features.vector(), cfg)[0])
    return alpha, nearest_bank(alpha, cfg)


@dataclass(frozen=True)
class BankKernel:
    """Rates and coefficients of one bank's exponential sum.

    The ``alpha = 1`` bank is the running sum (a single term with rate and
    coefficient exactly 1), since an exponential-sum rate must stay below 1.
    """

    alpha: float
    rates: np.ndarray
    coeffs: np.ndarray
    soe: SoeApprox | None = None

    @classmethod
    def from_order(cls, alpha: float, horizon: int, eps: float = 1e-3, n_terms: int | None = None):
        if alpha >= 1.0:
            return cls(1.0, np.ones(1), np.ones(1))
        approx = build_soe(alpha, horizon, eps, n_terms=n_terms)
        return cls(alpha, approx.rates, approx.coeffs, approx)

    @property
    def n_terms(self) -> int:
        return len(self.rates)

    def weight(self, lag):
        """Kernel value at integer lag(s)."""
        lag = np.asarray(lag, dtype=float)
        out = self.rates ** lag[..., None] @ self.coeffs
        return float(out) if np.ndim(out) == 0 else out


def make_bank_kernels(cfg: RoutingConfig, horizon: int, eps: float = 1e-3, n_terms: int | None = None):
    return [BankKernel.from_order(a, horizon, eps, n_terms) for a in cfg.orders]


@dataclass
class BankState:
    """Value accumulators ``M^{(k,s)}``; ``states[k-1]`` has shape ``(S_k, d_v)``."""

    kernels: list[BankKernel]
    d_v: int
    states: list[np.ndarray] = field(default_factory=list)
    t: int = 0

    def __post_init__(self):
        if not self.states:
            self.states = [np.zeros((kern.n_terms, self.d_v)) for kern in self.kernels]

    @property
    def K(self) -> int:
        return len(self.kernels)

    def to_json(self) -> str:
        return json.dumps(
            {
                "version": SNAPSHOT_VERSION,
                "t": self.t,
                "d_v": self.d_v,
                "banks": [
                    {
                        "alpha": kern.alpha,
                        "rates": kern.rates.tolist(),
                        "coeffs": kern.coeffs.tolist(),
                        "state": st.tolist(),
                    }
                    for kern, st in zip(self.kernels, self.states)
                ],
            },
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, blob: str) -> "BankState":
        data = json.loads(blob)
        if data.get("version") != SNAPSHOT_VERSION:
            raise ValueError(f"unsupported snapshot version {data.get('version')!r}")
        kernels = [BankKernel(b["alpha"], np.array(b["rates"]), np.array(b["coeffs"])) for b in data["banks"]]
        states = [np.array(b["state"], dtype=float).reshape(len(b["rates"]), data["d_v"]) for b in data["banks"]]
        return cls(kernels, data["d_v"], states, data["t"])


def make_bank_state(cfg: RoutingConfig, horizon: int, d_v: int, eps: float = 1e-3, n_terms: int | None = None):
    return BankState(make_bank_kernels(cfg, horizon, eps, n_terms), d_v)


def bank_step(state: BankState, v_t, bank_index: int) -> BankState:
    """Decay every accumulator by its rate; add ``c_s v_t`` to the routed bank."""
    if not 1 <= bank_index <= state.K:
        raise IndexError(f"bank_index {bank_index} outside [1, {state.K}]")
    v_t = np.asarray(v_t, dtype=float)
    if v_t.shape != (state.d_v,):
        raise ValueError(f"value has shape {v_t.shape}, expected ({state.d_v},)")
    for k, (kern, st) in enumerate(zip(state.kernels, state.states), start=1):
        st *= kern.rates[:, None]
        if k == bank_index:
            st += kern.coeffs[:, None] * v_t[None, :]
    state.t += 1
    return state


def bank_fractional_state(state: BankState, k: int) -> np.ndarray:
    """``M_t^{(k)} = sum_s M_t^{(k,s)}``."""
    if not 1 <= k <= state.K:
        raise IndexError(f"bank {k} outside [1, {state.K}]")
    return state.states[k - 1].sum(axis=0)


def growth_profile(alpha: float, t_max: int, input_norm: float = 1.0) -> np.ndarray:
    """Rows ``(t, ||M_t||)`` of the exact fractional state fed constant inputs.

    With every ``v_i`` equal to the same vector of norm ``input_norm`` the
    state norm is ``input_norm * sum_{j<t} w_j``, accumulated here directly
    from the weights.
    """
    if t_max < 10:
        raise ValueError("t_max must be >= 10")
    w = gl_weights(alpha, t_max - 1).values
    t = np.arange(1, t_max + 1)
    return np.column_stack([t, input_norm * np.cumsum(w)])
