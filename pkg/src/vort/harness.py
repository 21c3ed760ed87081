"""Training and evaluation of retention kernels on the synthetic retrieval tasks.

Three model kinds share one retrieval accumulator and differ only in the
kernel that weights the past:

* ``powerlaw``: K routed banks, each an exponential-sum fit of a fractional
  kernel; tokens are routed by a learned order (updated by plasticity at
  epoch boundaries).
* ``exponential``: a single decay ``e^{-lambda j}``.
* ``mixture5``: ``sum_m pi_m e^{-lambda_m j}`` with learned weights and rates.

Every model also has exact softmax attention over a trailing window, and the
class logits are a linear readout of ``[retrieved; window]``.

Training uses the dense form of the retrieval (all pairs ``i < t`` at once),
which is algebraically the accumulator recurrence; evaluation runs the
accumulators themselves (:func:`vort.retrieval.scan_outputs`).
"""

from __future__ import annotations

import hashlib
import json
import math
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy.optimize import minimize, nnls
from scipy.special import expit, log_softmax, logit

from vort.banks import BankKernel, RoutingConfig, make_bank_kernels, nearest_bank
from vort.gl_kernel import gl_weights
from vort.numerics import RngStream
from vort.plasticity import RetrievalTrace, SoeFamily, loss_alpha_grads
from vort.retrieval import DEFAULT_EPS0, FeatureMap, RetrievalAccumulators, make_feature_map, scan_outputs
from vort.tasks import TaskConfig, TaskSequence, bucket_lags, generate, scaled_edges
from vort.theory_checks import MixtureModel

KINDS = ("powerlaw", "exponential", "mixture5")
EXP_LAMBDA_GRID = tuple(10.0 ** (-k / 2) for k in range(9))


class TrainingDivergence(RuntimeError):
    def __init__(self, message: str, curve: list[float]):
        super().__init__(f"{message}; epoch losses so far: {curve}")
        self.curve = curve


def softplus(x):
    return np.logaddexp(0.0, x)


def softplus_inv(y):
    y = np.asarray(y, dtype=float)
    return y + np.log(-np.expm1(-y))


# ---- model ------------------------------------------------------------------


@dataclass(frozen=True)
class ModelSpec:
    kind: str
    d: int = 32
    d_k: int = 32
    d_v: int = 32
    d_phi: int = 64
    C: int = 16
    window: int = 32
    horizon: int = 2000
    # powerlaw
    alpha0: float = 0.7
    n_terms: int = 10
    soe_eps: float = 1e-3
    delta: float = 0.4
    K: int = 4
    # exponential
    exp_lambda: float = 0.01
    # mixture5
    mix_rates: tuple = ()
    mix_weights: tuple = ()
    eps0: float = DEFAULT_EPS0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.kind == "powerlaw" and not self.delta < self.alpha0 < 1.0:
            raise ValueError("alpha0 must lie in (delta, 1)")


@dataclass
class Model:
    spec: ModelSpec
    params: dict
    fm: FeatureMap
    bank_kernels: list[BankKernel] = field(default_factory=list)

    def kernels(self) -> list[BankKernel]:
        """Bank kernels for the current parameters (one bank for the single-decay kinds)."""
        kind = self.spec.kind
        if kind == "powerlaw":
            return self.bank_kernels
        if kind == "exponential":
            lam = float(softplus(self.params["lam_raw"][0]))
            return [BankKernel(float("nan"), np.array([math.exp(-lam)]), np.ones(1))]
        rates = softplus(self.params["mix_rate_raw"])
        weights = softplus(self.params["mix_weight_raw"])
        return [BankKernel(float("nan"), np.exp(-rates), weights)]

    def routing(self) -> RoutingConfig:
        return RoutingConfig(self.spec.delta, self.spec.K, self.params["route_W"], float(self.params["route_b"][0]))

    def orders(self, seq: TaskSequence) -> np.ndarray:
        """Continuous per-token orders from the router (powerlaw only)."""
        feats = routing_features(seq)
        z = feats @ self.params["route_W"] + self.params["route_b"][0]
        return self.spec.delta + (1.0 - self.spec.delta) * expit(z)

    def banks(self, seq: TaskSequence) -> np.ndarray:
        if self.spec.kind != "powerlaw":
            return np.ones(seq.n, dtype=int)
        return nearest_bank(self.orders(seq), self.routing())


def routing_features(seq: TaskSequence) -> np.ndarray:
    """Rows ``[x_i; H_i; e_i]``."""
    return np.column_stack([seq.tokens, seq.entropy, seq.entity_flags.astype(float)])


def init_model(spec: ModelSpec, seed: int) -> Model:
    rng = RngStream(seed)
    s = 1.0 / math.sqrt(spec.d)
    params = {
        "Wk": rng.gaussian((spec.d_k, spec.d)) * s,
        "Wq": rng.gaussian((spec.d_k, spec.d)) * s,
        "Wv": rng.gaussian((spec.d_v, spec.d)) * s,
        "Wo": rng.gaussian((spec.C, 2 * spec.d_v)) * 0.01,
        "bo": np.zeros(spec.C),
    }
    fm = make_feature_map(spec.d_k, spec.d_phi, seed=int(rng.integers(0, 2**62)))
    model = Model(spec, params, fm)
    if spec.kind == "powerlaw":
        params["route_W"] = np.zeros(spec.d + 2)
        # every token starts at alpha0
        params["route_b"] = np.array([float(logit((spec.alpha0 - spec.delta) / (1.0 - spec.delta)))])
        cfg = RoutingConfig(spec.delta, spec.K, params["route_W"])
        model.bank_kernels = make_bank_kernels(cfg, spec.horizon, spec.soe_eps, n_terms=spec.n_terms)
    elif spec.kind == "exponential":
        params["lam_raw"] = softplus_inv([spec.exp_lambda])
    else:
        rates = np.asarray(spec.mix_rates or np.geomspace(1.0 / spec.horizon, 1.0, 5), dtype=float)
        weights = np.asarray(spec.mix_weights or np.full(len(rates), 1.0 / len(rates)), dtype=float)
        params["mix_rate_raw"] = softplus_inv(rates)
        params["mix_weight_raw"] = softplus_inv(weights)
    return model


TRAINABLE_KERNEL = {"exponential": ("lam_raw",), "mixture5": ("mix_rate_raw", "mix_weight_raw"), "powerlaw": ()}
NO_DECAY = {"bo", "lam_raw", "mix_rate_raw", "mix_weight_raw"}


# ---- feature map with backward ---------------------------------------------


def _phi(fm: FeatureMap, x: np.ndarray):
    c = fm.d_k**-0.25
    xs = x * c
    out = np.exp(xs @ fm.projection.T - 0.5 * np.sum(xs * xs, axis=-1, keepdims=True)) / math.sqrt(fm.d_phi)
    return out, xs


def _phi_backward(fm: FeatureMap, phi: np.ndarray, xs: np.ndarray, dphi: np.ndarray) -> np.ndarray:
    # d phi_r / d x = phi_r (omega_r - x~) c
    c = fm.d_k**-0.25
    g = dphi * phi
    return c * (g @ fm.projection - xs * g.sum(axis=-1, keepdims=True))


# ---- dense forward / backward ----------------------------------------------


def lag_tables(model: Model, n: int, kernel_mode: str = "soe") -> np.ndarray:
    """Row ``b - 1`` holds bank ``b``'s weight at lags ``0..n``.

    ``kernel_mode="exact"`` uses the exact fractional weights for every
    fractional bank (the running-sum bank is exact either way).
    """
    ks = model.kernels()
    j = np.arange(n + 1, dtype=float)
    tab = np.empty((len(ks), n + 1))
    for b, k in enumerate(ks):
        if kernel_mode == "exact":
            if math.isnan(k.alpha):
                raise ValueError("exact kernels exist only for fractional banks")
            tab[b] = 1.0 if k.alpha >= 1.0 else gl_weights(k.alpha, n).values
        else:
            tab[b] = np.exp(-np.outer(j, -np.log(k.rates))) @ k.coeffs
    return tab


def kernel_matrix(model: Model, seq: TaskSequence, banks: np.ndarray, kernel_mode: str = "soe"):
    """Weights ``w_{b_i}(t - i)`` for every (query, token) pair; zero unless ``i < t``.

    Also returns the flat (bank, lag) bin of every pair, which is all the
    kernel-parameter gradients need.
    """
    lags = seq.query_positions[:, None] - np.arange(seq.n)[None, :]
    valid = lags > 0
    lag_c = np.where(valid, lags, 0)
    tab = lag_tables(model, seq.n, kernel_mode)
    tab[:, 0] = 0.0  # lag 0 never contributes
    bins = (banks - 1)[None, :] * (seq.n + 1) + lag_c
    return tab.ravel()[bins], bins


def _kernel_param_grads(model: Model, dW: np.ndarray, bins: np.ndarray, n: int):
    """Gradients of the loss with respect to each exponential term's coefficient and rate exponent."""
    ks = model.kernels()
    hist = np.bincount(bins.ravel(), weights=dW.ravel(), minlength=len(ks) * (n + 1)).reshape(len(ks), n + 1)
    hist[:, 0] = 0.0
    j = np.arange(n + 1, dtype=float)
    dc, dxi = [], []
    for b, k in enumerate(ks):
        xi = -np.log(k.rates)
        E = np.exp(-np.outer(xi, j))  # (S, n+1)
        dc.append(E @ hist[b])
        dxi.append(-k.coeffs * (E @ (hist[b] * j)))
    return np.concatenate(dc), np.concatenate(dxi)


def _local_attention(Qm, K, V, pos, window):
    Q = len(pos)
    offs = np.arange(1, window + 1)
    idx = pos[:, None] - offs[None, :]
    ok = idx >= 0
    idx_c = np.where(ok, idx, 0)
    scale = 1.0 / math.sqrt(K.shape[1])
    Kw = K[idx_c]  # (Q, w, d_k)
    Vw = V[idx_c]
    logits = np.einsum("qd,qwd->qw", Qm, Kw) * scale
    logits = np.where(ok, logits, -np.inf)
    has = ok.any(axis=1)
    logits[~has, 0] = 0.0  # position 0 has no window; output is zero
    p = np.exp(logits - logits.max(axis=1, keepdims=True))
    p /= p.sum(axis=1, keepdims=True)
    p[~has] = 0.0
    U = np.einsum("qw,qwv->qv", p, Vw)
    return U, (idx_c, ok, p, Kw, Vw, scale)


def _local_attention_backward(dU, Qm, cache, dK, dV, dQm):
    idx_c, ok, p, Kw, Vw, scale = cache
    dp = np.einsum("qv,qwv->qw", dU, Vw)
    dlog = p * (dp - np.sum(p * dp, axis=1, keepdims=True))
    dQm += np.einsum("qw,qwd->qd", dlog, Kw) * scale
    dKw = dlog[:, :, None] * Qm[:, None, :] * scale
    dVw = p[:, :, None] * dU[:, None, :]
    np.add.at(dK, idx_c[ok], dKw[ok])
    np.add.at(dV, idx_c[ok], dVw[ok])


def forward_dense(model: Model, seq: TaskSequence, grad: bool = True, kernel_mode: str = "soe"):
    """Loss (summed cross-entropy over queries), logits and optionally parameter gradients."""
    P = model.params
    X = seq.tokens
    pos = seq.query_positions
    K = X @ P["Wk"].T
    V = X @ P["Wv"].T
    Qm = X[pos] @ P["Wq"].T
    Phi, Ks = _phi(model.fm, K)
    Psi, Qs = _phi(model.fm, Qm)
    S = Psi @ Phi.T  # (Q, n) random-feature scores
    banks = model.banks(seq)
    Wk_mat, bins = kernel_matrix(model, seq, banks, kernel_mode)
    A = S * Wk_mat
    den = A.sum(axis=1) + model.spec.eps0
    O = (A @ V) / den[:, None]
    U, acache = _local_attention(Qm, K, V, pos, model.spec.window)
    Z = np.concatenate([O, U], axis=1)
    logits = Z @ P["Wo"].T + P["bo"]
    logp = log_softmax(logits, axis=1)
    y = seq.labels
    loss = -float(logp[np.arange(len(y)), y].sum())
    if not grad:
        return loss, logits, None

    g = {}
    dlogits = np.exp(logp)
    dlogits[np.arange(len(y)), y] -= 1.0
    g["Wo"] = dlogits.T @ Z
    g["bo"] = dlogits.sum(axis=0)
    dZ = dlogits @ P["Wo"]
    dO, dU = dZ[:, : model.spec.d_v], dZ[:, model.spec.d_v :]
    dK = np.zeros_like(K)
    dV = np.zeros_like(V)
    dQm = np.zeros_like(Qm)
    _local_attention_backward(dU, Qm, acache, dK, dV, dQm)
    # O = (A V) / den
    dnum = dO / den[:, None]
    dden = -np.sum(dO * O, axis=1) / den
    dA = dnum @ V.T + dden[:, None]
    dV += A.T @ dnum
    dS = dA * Wk_mat
    dPsi = dS @ Phi
    dPhi = dS.T @ Psi
    dK += _phi_backward(model.fm, Phi, Ks, dPhi)
    dQm += _phi_backward(model.fm, Psi, Qs, dPsi)
    g["Wk"] = dK.T @ X
    g["Wv"] = dV.T @ X
    g["Wq"] = dQm.T @ X[pos]
    if model.spec.kind != "powerlaw":
        dc, dxi = _kernel_param_grads(model, dA * S, bins, seq.n)
        if model.spec.kind == "exponential":
            g["lam_raw"] = dxi * expit(P["lam_raw"])
        else:
            g["mix_rate_raw"] = dxi * expit(P["mix_rate_raw"])
            g["mix_weight_raw"] = dc * expit(P["mix_weight_raw"])
    return loss, logits, g


# ---- accumulator evaluation path -------------------------------------------


def predict(model: Model, seq: TaskSequence, kernel_mode: str = "soe") -> np.ndarray:
    """Class predictions; the retrieval half runs the linear-time accumulators.

    ``kernel_mode="exact"`` replaces every fractional bank by its exact
    weights (quadratic cost), leaving routing and all other parameters as they are.
    """
    P = model.params
    X = seq.tokens
    pos = seq.query_positions
    K = X @ P["Wk"].T
    V = X @ P["Wv"].T
    Qm = X[pos] @ P["Wq"].T
    banks = model.banks(seq)
    if kernel_mode == "exact":
        Psi, _ = _phi(model.fm, Qm)
        Phi, _ = _phi(model.fm, K)
        A = (Psi @ Phi.T) * kernel_matrix(model, seq, banks, "exact")[0]
        O = (A @ V) / (A.sum(axis=1) + model.spec.eps0)[:, None]
    else:
        O = scan_outputs(model.kernels(), model.fm, K, V, banks, pos, Qm, model.spec.eps0)
    U, _ = _local_attention(Qm, K, V, pos, model.spec.window)
    logits = np.concatenate([O, U], axis=1) @ P["Wo"].T + P["bo"]
    return np.argmax(logits, axis=1)


def accumulator_ops_per_token(model: Model, seq: TaskSequence, steps: int = 64) -> float:
    """Measured multiply-adds per token of the recurrent path over the first ``steps`` tokens."""
    P = model.params
    acc = RetrievalAccumulators(model.kernels(), model.fm, model.spec.d_v, model.spec.eps0)
    banks = model.banks(seq)
    K = seq.tokens @ P["Wk"].T
    V = seq.tokens @ P["Wv"].T
    for t in range(min(steps, seq.n)):
        acc.tick()
        acc.retrieve(K[t])
        acc.add(K[t], V[t], int(banks[t]))
    return acc.ops / min(steps, seq.n)


# ---- optimiser --------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    lr: float = 3e-4
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    clip: float = 1.0
    batch_size: int = 4
    seed: int = 0
    plasticity_eta: float = 0.5
    plasticity_seqs: int = 4
    plasticity_steps: int = 1

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")


class AdamW:
    """Adam with decoupled weight decay and global-norm gradient clipping."""

    def __init__(self, params: dict, cfg: TrainConfig, trainable):
        self.cfg = cfg
        self.names = list(trainable)
        self.m = {k: np.zeros_like(params[k]) for k in self.names}
        self.v = {k: np.zeros_like(params[k]) for k in self.names}
        self.t = 0

    def step(self, params: dict, grads: dict) -> float:
        cfg = self.cfg
        norm = math.sqrt(sum(float(np.sum(grads[k] ** 2)) for k in self.names))
        scale = min(1.0, cfg.clip / norm) if norm > 0 and cfg.clip > 0 else 1.0
        self.t += 1
        b1, b2 = cfg.betas
        corr = math.sqrt(1 - b2**self.t) / (1 - b1**self.t)
        for k in self.names:
            gk = grads[k] * scale
            self.m[k] = b1 * self.m[k] + (1 - b1) * gk
            self.v[k] = b2 * self.v[k] + (1 - b2) * gk * gk
            if k not in NO_DECAY:
                params[k] -= cfg.lr * cfg.weight_decay * params[k]
            params[k] -= cfg.lr * corr * self.m[k] / (np.sqrt(self.v[k]) + cfg.eps)
        return norm


# ---- plasticity on the router -----------------------------------------------


def plasticity_update(model: Model, seqs: list[TaskSequence], eta: float, steps: int = 1) -> float:
    """Projected order descent applied through the router.

    Each token's order ``alpha_i`` gets the retrieval-loss gradient (exact
    scores, exponential-sum kernel at the continuous order); the gradient is
    chained through the sigmoid into the routing weights. The sigmoid keeps
    every order inside ``(delta, 1)``. Returns the norm of the last routing
    gradient (per query).
    """
    spec = model.spec
    family = SoeFamily(spec.horizon, spec.soe_eps, spec.n_terms)
    P = model.params
    last = float("nan")
    for _ in range(steps):
        gW = np.zeros_like(P["route_W"])
        gb = 0.0
        total_q = 0
        for seq in seqs:
            K = seq.tokens @ P["Wk"].T
            Qm = seq.tokens[seq.query_positions] @ P["Wq"].T
            trace = RetrievalTrace(K, seq.query_positions, Qm, seq.sources)
            feats = routing_features(seq)
            z = feats @ P["route_W"] + P["route_b"][0]
            sig = expit(z)
            alphas = spec.delta + (1.0 - spec.delta) * sig
            ga = loss_alpha_grads(trace, alphas, family)
            gz = ga * (1.0 - spec.delta) * sig * (1.0 - sig)
            gW += feats.T @ gz
            gb += float(gz.sum())
            total_q += len(seq.query_positions)
        gW /= total_q
        gb /= total_q
        P["route_W"] -= eta * gW
        P["route_b"] -= eta * gb
        last = math.sqrt(float(gW @ gW) + gb * gb)
    return last


# ---- training and evaluation -------------------------------------------------


@dataclass
class TrainResult:
    model: Model
    curve: list[float]
    trend_ok: bool
    seconds: float


def train(model: Model, data: list[TaskSequence], cfg: TrainConfig) -> TrainResult:
    """AdamW on summed-over-batch mean cross-entropy; plasticity on the router after each epoch."""
    if not data:
        raise ValueError("training data is empty")
    t0 = time.perf_counter()
    trainable = ["Wk", "Wq", "Wv", "Wo", "bo", *TRAINABLE_KERNEL[model.spec.kind]]
    opt = AdamW(model.params, cfg, trainable)
    rng = RngStream(cfg.seed).child(7)
    curve: list[float] = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(data))
        tot, nq = 0.0, 0
        for start in range(0, len(order), cfg.batch_size):
            batch = [data[i] for i in order[start : start + cfg.batch_size]]
            grads = {k: np.zeros_like(model.params[k]) for k in trainable}
            bq = 0
            for seq in batch:
                loss, _, g = forward_dense(model, seq)
                for k in trainable:
                    grads[k] += g[k]
                tot += loss
                bq += len(seq.query_positions)
            for k in trainable:
                grads[k] /= bq
            nq += bq
            opt.step(model.params, grads)
        curve.append(tot / nq)
        if not math.isfinite(curve[-1]) or curve[-1] > 10 * curve[0]:
            raise TrainingDivergence(f"loss diverged at epoch {epoch}", curve)
        if model.spec.kind == "powerlaw" and cfg.plasticity_eta > 0:
            sub = [data[i] for i in order[: cfg.plasticity_seqs]]
            plasticity_update(model, sub, cfg.plasticity_eta, cfg.plasticity_steps)
    trend = len(curve) < 2 or curve[-1] < curve[0]
    return TrainResult(model, curve, trend, time.perf_counter() - t0)


@dataclass
class EvalReport:
    buckets: dict  # name -> accuracy in percent (None when empty)
    counts: dict
    per_beta: dict
    confusion: list
    seconds: float
    ops_per_token: float

    def to_dict(self) -> dict:
        return asdict(self)


def _bucket_acc(correct: np.ndarray, lags: np.ndarray, edges) -> tuple[dict, dict]:
    parts = bucket_lags(lags, edges)
    acc = {k: (100.0 * float(correct[v].mean()) if len(v) else None) for k, v in parts.items()}
    return acc, {k: int(len(v)) for k, v in parts.items()}


def evaluate(model: Model, data: list[TaskSequence], edges, kernel_mode: str = "soe") -> EvalReport:
    """Top-1 accuracy per lag bucket, pooled over sequences, and per Zipf exponent."""
    t0 = time.perf_counter()
    C = model.spec.C
    preds, labels, lags, betas = [], [], [], []
    for seq in data:
        preds.append(predict(model, seq, kernel_mode))
        labels.append(seq.labels)
        lags.append(seq.lags)
        betas.append(np.full(len(seq.labels), seq.beta))
    preds, labels, lags, betas = map(np.concatenate, (preds, labels, lags, betas))
    correct = preds == labels
    acc, counts = _bucket_acc(correct, lags, edges)
    per_beta = {}
    for b in np.unique(betas[~np.isnan(betas)]):
        sel = betas == b
        per_beta[repr(float(b))] = _bucket_acc(correct[sel], lags[sel], edges)[0]
    confusion = np.zeros((C, C), dtype=int)
    np.add.at(confusion, (labels, preds), 1)
    ops = accumulator_ops_per_token(model, data[0])
    return EvalReport(acc, counts, per_beta, confusion.tolist(), time.perf_counter() - t0, ops)


def validation_accuracy(model: Model, data: list[TaskSequence]) -> float:
    hits = sum(int(np.sum(predict(model, s) == s.labels)) for s in data)
    return 100.0 * hits / sum(len(s.labels) for s in data)


# ---- mixture fitting ----------------------------------------------------------


@dataclass
class MixtureFit:
    mixture: MixtureModel
    residual: float
    converged: bool
    iterations: int
    message: str


def powerlaw_target(alpha: float, T: int, target: str = "normalized") -> np.ndarray:
    """Samples at ``j = 1..T`` of ``j^{alpha-1}/Gamma(alpha)`` (normalized), ``j^{alpha-1}`` (raw) or the exact weights (gl)."""
    j = np.arange(1, T + 1, dtype=float)
    if target == "normalized":
        return j ** (alpha - 1.0) / math.gamma(alpha)
    if target == "raw":
        return j ** (alpha - 1.0)
    if target == "gl":
        return gl_weights(alpha, T).values[1:]
    raise ValueError(f"unknown target {target!r}")


def mixture_residual(mix: MixtureModel, alpha: float, T: int, target: str = "normalized") -> float:
    j = np.arange(1, T + 1, dtype=float)
    return float(np.sum((mix(j) - powerlaw_target(alpha, T, target)) ** 2))


def fit_mixture_to_powerlaw(
    alpha: float,
    T: int,
    M: int,
    target: str = "normalized",
    init: MixtureModel | None = None,
    max_iter: int = 2000,
) -> MixtureFit:
    """Least-squares fit of ``M`` exponentials to a power law on ``j = 1..T``.

    Weights and rates are softplus images of free reals, optimised by
    L-BFGS with the analytic gradient. Without ``init``, rates start
    log-spaced on ``[1/T, 1]`` with nonnegative least-squares weights.
    """
    if M < 1:
        raise ValueError("M must be >= 1")
    y = powerlaw_target(alpha, T, target)
    j = np.arange(1, T + 1, dtype=float)
    if init is None:
        rates0 = np.geomspace(1.0 / T, 1.0, M) if M > 1 else np.array([1.0 / math.sqrt(T)])
        weights0, _ = nnls(np.exp(-np.outer(j, rates0)), y)
        weights0 = np.maximum(weights0, 1e-8)
    else:
        rates0, weights0 = np.asarray(init.rates, float), np.maximum(np.asarray(init.weights, float), 1e-300)
    theta0 = np.concatenate([softplus_inv(weights0), softplus_inv(rates0)])

    def f(theta):
        a, b = theta[:M], theta[M:]
        pi, lam = softplus(a), softplus(b)
        E = np.exp(-np.outer(j, lam))
        r = E @ pi - y
        val = float(r @ r)
        g_pi = 2.0 * (E.T @ r)
        g_lam = -2.0 * pi * ((E * j[:, None]).T @ r)
        return val, np.concatenate([g_pi * expit(a), g_lam * expit(b)])

    start_val = f(theta0)[0]
    res = minimize(f, theta0, jac=True, method="L-BFGS-B", options={"maxiter": max_iter, "ftol": 1e-15, "gtol": 1e-12})
    theta = res.x if res.fun <= start_val else theta0
    mix = MixtureModel(softplus(theta[:M]), softplus(theta[M:]))
    return MixtureFit(mix, min(float(res.fun), start_val), bool(res.success), int(res.nit), str(res.message))


# ---- experiment ----------------------------------------------------------------


PRESETS = {
    "desk": {
        "n": 2000,
        "d": 32,
        "d_k": 32,
        "d_v": 32,
        "d_phi": 64,
        "K": 4,
        "S": 10,
        "delta": 0.4,
        "C": 16,
        "E": 20,
        "window": 32,
        "train_seqs": 48,
        "test_seqs": 24,
        "val_frac": 0.1,
        "epochs": 15,
        "lr": 3e-2,
        "batch_size": 1,
        "tune_epochs": 3,
        "queries_per_seq": 64,
        "rementions": 4,
    },
    "paper": {
        "n": None,  # per task: 10000 (zipf), 8000 (copy)
        "d": 256,
        "d_k": 256,
        "d_v": 256,
        "d_phi": 64,
        "K": 8,
        "S": 15,
        "delta": 0.4,
        "C": 16,
        "E": 20,
        "window": 32,
        "train_seqs": 5000,
        "test_seqs": 1000,
        "val_frac": 0.1,
        "epochs": 20,
        "lr": 3e-4,
        "batch_size": 16,
        "tune_epochs": 2,
        "queries_per_seq": 64,
        "rementions": 4,
    },
}
ZIPF_BETAS = (1.0, 1.5, 2.0)


def resolve_preset(name: str, task: str, overrides: dict | None = None) -> dict:
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    cfg = dict(PRESETS[name])
    if cfg["n"] is None:
        cfg["n"] = {"zipf": 10_000, "copy": 8_000}[task]
    for k, v in (overrides or {}).items():
        if k not in cfg:
            raise KeyError(f"unknown preset key {k!r}")
        cfg[k] = v
    return cfg


def config_hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, default=str).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]


def make_datasets(task: str, pre: dict, seed: int):
    """Train / validation / test sequences; Zipf data cycles through the three exponents."""
    base = dict(n=pre["n"], C=pre["C"], E=pre["E"], d=pre["d"], queries_per_seq=pre["queries_per_seq"], rementions=pre["rementions"])
    root = RngStream(seed)

    def draw(count: int, tag: int):
        if task == "copy":
            return generate(TaskConfig(kind="copy", count=count, seed=int(root.child(tag).integers(0, 2**62)), **base))
        out = []
        for bi, beta in enumerate(ZIPF_BETAS):
            c = count // len(ZIPF_BETAS) + (1 if bi < count % len(ZIPF_BETAS) else 0)
            s = int(root.child(tag * 10 + bi).integers(0, 2**62))
            out += generate(TaskConfig(kind="zipf", count=c, zipf_beta=beta, seed=s, **base))
        return out

    train_all = draw(pre["train_seqs"], 1)
    n_val = max(1, int(round(pre["val_frac"] * len(train_all))))
    # interleave so the validation split covers every exponent
    val = train_all[::max(1, len(train_all) // n_val)][:n_val]
    val_ids = {id(s) for s in val}
    train_set = [s for s in train_all if id(s) not in val_ids]
    test = draw(pre["test_seqs"], 2)
    return train_set, val, test


def _spec(kind: str, pre: dict, **kw) -> ModelSpec:
    return ModelSpec(
        kind=kind,
        d=pre["d"],
        d_k=pre["d_k"],
        d_v=pre["d_v"],
        d_phi=pre["d_phi"],
        C=pre["C"],
        window=pre["window"],
        horizon=pre["n"],
        n_terms=pre["S"],
        delta=pre["delta"],
        K=pre["K"],
        **kw,
    )


def tune_exponential(pre: dict, train_set, val, seed: int, tcfg: TrainConfig) -> tuple[float, dict]:
    """Pick lambda from the grid by validation accuracy after a short run from a common init."""
    scores = {}
    short = replace(tcfg, epochs=pre["tune_epochs"])
    for lam in EXP_LAMBDA_GRID:
        m = init_model(_spec("exponential", pre, exp_lambda=lam), seed)
        train(m, train_set, short)
        scores[repr(lam)] = validation_accuracy(m, val)
    best = max(EXP_LAMBDA_GRID, key=lambda lam: (scores[repr(lam)], -lam))
    return best, scores


def run_experiment(task: str, preset: str = "desk", seed: int = 0, overrides: dict | None = None) -> dict:
    """Train and evaluate PowerLaw, Exponential, Mixture5 and the two ablations on one seed.

    Ablations: ``powerlaw_s1`` is a PowerLaw model trained with one
    exponential term per bank; ``powerlaw_exact`` is the trained PowerLaw
    model evaluated with exact fractional weights in place of the exponential sums.
    """
    if task not in ("zipf", "copy"):
        raise ValueError(f"unknown task {task!r}")
    t0 = time.perf_counter()
    pre = resolve_preset(preset, task, overrides)
    edges = scaled_edges(task, pre["n"])
    train_set, val, test = make_datasets(task, pre, seed)
    tcfg = TrainConfig(epochs=pre["epochs"], lr=pre["lr"], batch_size=pre["batch_size"], seed=seed)
    rows = {}
    curves = {}

    lam, lam_scores = tune_exponential(pre, train_set, val, seed, tcfg)
    specs = {
        "powerlaw": _spec("powerlaw", pre),
        "exponential": _spec("exponential", pre, exp_lambda=lam),
        "mixture5": _spec("mixture5", pre),
        "powerlaw_s1": replace(_spec("powerlaw", pre), n_terms=1),
    }
    trained = {}
    for name, spec in specs.items():
        res = train(init_model(spec, seed), train_set, tcfg)
        trained[name] = res.model
        curves[name] = {"loss": res.curve, "trend_ok": res.trend_ok, "seconds": res.seconds}
        rows[name] = evaluate(res.model, test, edges).to_dict()
    rows["powerlaw_exact"] = evaluate(trained["powerlaw"], test, edges, kernel_mode="exact").to_dict()

    pl = trained["powerlaw"]
    orders = np.concatenate([pl.orders(s) for s in test])
    flags = np.concatenate([s.entity_flags for s in test]).astype(bool)
    bin_edges = np.linspace(pre["delta"], 1.0, 21)
    return {
        "task": task,
        "preset": preset,
        "seed": seed,
        "config": pre,
        "config_hash": config_hash({"task": task, "preset": pre, "seed": seed}),
        "edges": list(edges),
        "exp_lambda": lam,
        "exp_lambda_scores": lam_scores,
        "mixture5": {
            "weights": softplus(trained["mixture5"].params["mix_weight_raw"]).tolist(),
            "rates": softplus(trained["mixture5"].params["mix_rate_raw"]).tolist(),
        },
        "alpha_mean": {"entity": float(orders[flags].mean()), "other": float(orders[~flags].mean())},
        "alpha_hist": {
            "edges": bin_edges.tolist(),
            "entity": np.histogram(orders[flags], bin_edges)[0].tolist(),
            "other": np.histogram(orders[~flags], bin_edges)[0].tolist(),
        },
        "rows": rows,
        "curves": curves,
        "seconds": time.perf_counter() - t0,
    }


MODEL_ROWS = ("powerlaw", "exponential", "mixture5", "powerlaw_s1", "powerlaw_exact")


def summarize(reports: list[dict]) -> dict:
    """Mean and range over seeds of every (row, bucket) accuracy."""
    out = {}
    for row in MODEL_ROWS:
        out[row] = {}
        for b in reports[0]["rows"][row]["buckets"]:
            vals = [r["rows"][row]["buckets"][b] for r in reports if r["rows"][row]["buckets"][b] is not None]
            out[row][b] = {
                "mean": float(np.mean(vals)) if vals else None,
                "min": float(np.min(vals)) if vals else None,
                "max": float(np.max(vals)) if vals else None,
            }
    return out


def table_rows(summary: dict) -> list[dict]:
    """Flat rows ``(model, bucket, mean, min, max)`` for CSV output."""
    rows = []
    for model, buckets in summary.items():
        for b, s in buckets.items():
            rows.append({"model": model, "bucket": b, **s})
    return rows
