"""Synthetic long-range retrieval tasks.

Token embeddings have a key half and a value half. A source token (Zipf
anchor or entity first mention) carries its label as a codebook direction in
the value half; the token that queries it repeats the source's key with a
little noise and has an empty value half. Everything else is filler with
random key and value halves.

Zipf task: each query at position ``t`` has its anchor at lag ``d`` drawn
from ``P(D = d) ~ d^-beta`` on ``1..t``.

Entity-copy task: ``E`` entities with fixed keys get a random label at their
first mention and reappear at later positions drawn uniformly after it.
Every re-mention is a query whose source is the first mention.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from vort.numerics import RngStream

MAGIC = b"VORTSEQ1"
CONTAINER_VERSION = 1

# full-scale lengths and bucket edges; desk runs scale the edges with n
FULL_N = {"zipf": 10_000, "copy": 8_000}
FULL_EDGES = {"zipf": (100, 1000), "copy": (200, 2000)}
BUCKET_NAMES = ("short", "medium", "long")


@dataclass(frozen=True)
class TaskConfig:
    kind: str = "zipf"
    n: int = 2000
    count: int = 8
    C: int = 16
    E: int = 20
    zipf_beta: float = 1.0
    seed: int = 0
    d: int = 32
    queries_per_seq: int = 64
    rementions: int = 4
    key_noise: float = 0.1

    def __post_init__(self):
        if self.kind not in ("zipf", "copy"):
            raise ValueError(f"unknown task kind {self.kind!r}")
        if self.n < 2:
            raise ValueError("n must be >= 2")
        if self.C < 2:
            raise ValueError("C must be >= 2")
        if self.kind == "copy" and self.E < 1:
            raise ValueError("E must be >= 1")
        if not self.zipf_beta > 0:
            raise ValueError("zipf_beta must be positive")
        if self.d < 4 or self.d % 2:
            raise ValueError("d must be an even number >= 4")
        if self.C > self.d // 2:
            raise ValueError("value half of the embedding cannot hold C orthonormal codes")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


@dataclass
class TaskSequence:
    tokens: np.ndarray  # (n, d)
    query_positions: np.ndarray  # (Q,) sorted
    sources: np.ndarray  # (Q,)
    labels: np.ndarray  # (Q,)
    entity_flags: np.ndarray  # (n,) 0/1
    entropy: np.ndarray  # (n,)
    beta: float = float("nan")
    meta: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.tokens.shape[0]

    @property
    def lags(self) -> np.ndarray:
        return self.query_positions - self.sources

    def validate(self, C: int) -> None:
        if np.any(self.sources >= self.query_positions) or np.any(self.sources < 0):
            raise ValueError("every source must precede its query")
        if np.any(self.labels < 0) or np.any(self.labels >= C):
            raise ValueError("label out of range")


def codebook(C: int, dim: int, seed: int) -> np.ndarray:
    """``C`` orthonormal rows in ``R^dim`` from a seeded QR factorisation."""
    g = RngStream(seed).gaussian((dim, C))
    q, r = np.linalg.qr(g)
    return (q * np.sign(np.diag(r))).T


def _unit_rows(stream: RngStream, count: int, dim: int) -> np.ndarray:
    g = stream.gaussian((count, dim))
    return g / np.linalg.norm(g, axis=1, keepdims=True)


def zipf_cdf(beta: float, d_max: int) -> np.ndarray:
    """Cumulative ``sum_{d <= k} d^-beta`` for ``k = 1..d_max`` (unnormalised)."""
    d = np.arange(1, d_max + 1, dtype=float)
    return np.cumsum(np.exp(-beta * np.log(d)))


def sample_zipf_lags(stream: RngStream, beta: float, limits, cdf: np.ndarray | None = None) -> np.ndarray:
    """One lag per entry of ``limits`` from ``P(D = d) ~ d^-beta`` restricted to ``1..limit``.

    Restricting by inverse CDF is the same law as drawing on the full support
    and redrawing until the lag fits.
    """
    limits = np.asarray(limits, dtype=int)
    if np.any(limits < 1):
        raise ValueError("every limit must be >= 1")
    if cdf is None:
        cdf = zipf_cdf(beta, int(limits.max()))
    u = stream.uniform(limits.shape) * cdf[limits - 1]
    return np.minimum(np.searchsorted(cdf, u, side="right") + 1, limits)


def _filler(stream: RngStream, cfg: TaskConfig):
    half = cfg.d // 2
    tokens = np.empty((cfg.n, cfg.d))
    tokens[:, :half] = _unit_rows(stream, cfg.n, half)
    tokens[:, half:] = stream.gaussian((cfg.n, half)) / math.sqrt(half)
    flags = np.zeros(cfg.n, dtype=np.uint8)
    entropy = np.full(cfg.n, math.log(cfg.C))
    return tokens, flags, entropy


def _zipf_sequence(stream: RngStream, cfg: TaskConfig, codes: np.ndarray, cdf: np.ndarray) -> TaskSequence:
    half = cfg.d // 2
    tokens, flags, entropy = _filler(stream, cfg)
    Q = min(cfg.queries_per_seq, (cfg.n - 1) // 2)
    used = np.zeros(cfg.n, dtype=bool)
    positions, sources = [], []
    # candidates visited in random order; a query whose anchor slot is taken is skipped
    for t in stream.permutation(np.arange(1, cfg.n)):
        if len(positions) == Q:
            break
        if used[t]:
            continue
        for _ in range(32):
            i = t - int(sample_zipf_lags(stream, cfg.zipf_beta, [t], cdf)[0])
            if not used[i]:
                break
        else:
            continue
        used[t] = used[i] = True
        positions.append(int(t))
        sources.append(i)
    order = np.argsort(positions)
    positions = np.asarray(positions, dtype=np.int64)[order]
    sources = np.asarray(sources, dtype=np.int64)[order]
    labels = stream.integers(0, cfg.C, len(positions)).astype(np.int64)
    keys = _unit_rows(stream, len(positions), half)
    tokens[sources, :half] = keys
    tokens[sources, half:] = codes[labels]
    tokens[positions, :half] = keys + cfg.key_noise * stream.gaussian((len(positions), half))
    tokens[positions, half:] = 0.0
    flags[sources] = 1
    entropy[sources] = 0.0
    return TaskSequence(tokens, positions, sources, labels, flags, entropy, beta=cfg.zipf_beta)


def _copy_sequence(stream: RngStream, cfg: TaskConfig, codes: np.ndarray, entity_keys: np.ndarray) -> TaskSequence:
    half = cfg.d // 2
    tokens, flags, entropy = _filler(stream, cfg)
    used = np.zeros(cfg.n, dtype=bool)
    entity_labels = stream.integers(0, cfg.C, cfg.E)
    positions, sources, labels, ents = [], [], [], []
    for e in range(cfg.E):
        free = np.flatnonzero(~used[: cfg.n - 1])
        p = int(free[stream.integers(0, len(free))])
        used[p] = True
        tokens[p, :half] = entity_keys[e]
        tokens[p, half:] = codes[entity_labels[e]]
        flags[p] = 1
        entropy[p] = 0.0
        for _ in range(cfg.rementions):
            later = np.flatnonzero(~used[p + 1 :]) + p + 1
            if not len(later):
                break
            t = int(later[stream.integers(0, len(later))])
            used[t] = True
            positions.append(t)
            sources.append(p)
            labels.append(int(entity_labels[e]))
            ents.append(e)
    positions = np.asarray(positions, dtype=np.int64)
    order = np.argsort(positions)
    positions = positions[order]
    sources = np.asarray(sources, dtype=np.int64)[order]
    labels = np.asarray(labels, dtype=np.int64)[order]
    ents = np.asarray(ents, dtype=np.int64)[order]
    tokens[positions, :half] = entity_keys[ents] + cfg.key_noise * stream.gaussian((len(positions), half))
    tokens[positions, half:] = 0.0
    flags[positions] = 1
    entropy[positions] = 0.0
    return TaskSequence(tokens, positions, sources, labels, flags, entropy, meta={"entities": ents.tolist()})


def label_codebook(cfg: TaskConfig) -> np.ndarray:
    # fixed across seeds: the label encoding is part of the task, not of a draw
    return codebook(cfg.C, cfg.d // 2, seed=1_000_003)


def entity_keys(cfg: TaskConfig) -> np.ndarray:
    return _unit_rows(RngStream(2_000_003), cfg.E, cfg.d // 2)


def gen_zipf_task(cfg: TaskConfig) -> list[TaskSequence]:
    if cfg.kind != "zipf":
        raise ValueError("config is not a zipf task")
    codes = label_codebook(cfg)
    cdf = zipf_cdf(cfg.zipf_beta, cfg.n)
    root = RngStream(cfg.seed)
    return [_zipf_sequence(root.child(s), cfg, codes, cdf) for s in range(cfg.count)]


def gen_entity_copy_task(cfg: TaskConfig) -> list[TaskSequence]:
    if cfg.kind != "copy":
        raise ValueError("config is not a copy task")
    codes = label_codebook(cfg)
    keys = entity_keys(cfg)
    root = RngStream(cfg.seed)
    return [_copy_sequence(root.child(s), cfg, codes, keys) for s in range(cfg.count)]


def generate(cfg: TaskConfig) -> list[TaskSequence]:
    return gen_zipf_task(cfg) if cfg.kind == "zipf" else gen_entity_copy_task(cfg)


def scaled_edges(kind: str, n: int) -> tuple[int, ...]:
    """Full-scale bucket edges scaled by ``n / full_n``."""
    f = n / FULL_N[kind]
    return tuple(int(round(e * f)) for e in FULL_EDGES[kind])


def normalized_lags(seq: TaskSequence) -> np.ndarray:
    """Copy-task lags mapped to ``(0, 1)``: a re-mention is uniform on ``1..n-1-source``."""
    return (seq.lags - 0.5) / (seq.n - 1 - seq.sources)


def bucket_lags(lags, edges) -> dict[str, np.ndarray]:
    """Indices of lags in ``(-inf, e_0]``, ``(e_0, e_1]``, ..., ``(e_last, inf)``.

    Bucket names are short/medium/long for two edges, ``b0, b1, ...`` otherwise.
    Empty buckets are kept as empty index arrays.
    """
    edges = list(edges)
    if any(b <= a for a, b in zip(edges, edges[1:])):
        raise ValueError("edges must be strictly increasing")
    lags = np.asarray(lags)
    which = np.searchsorted(np.asarray(edges), lags, side="left")
    names = BUCKET_NAMES if len(edges) == 2 else tuple(f"b{k}" for k in range(len(edges) + 1))
    return {name: np.flatnonzero(which == k) for k, name in enumerate(names)}


# ---- serialisation ---------------------------------------------------------

_SEQ_HEADER = struct.Struct("<IIId")  # n, d, Q, beta


def to_bytes(seqs: list[TaskSequence], cfg: TaskConfig) -> bytes:
    """Binary container.

    Layout (little-endian): ``b"VORTSEQ1"``, u32 version, u32 config length,
    config JSON (UTF-8), u32 sequence count, then per sequence: u32 n, u32 d,
    u32 Q, f64 beta, f64 tokens[n*d], u8 entity_flags[n], f64 entropy[n],
    i64 query_positions[Q], i64 sources[Q], i64 labels[Q].
    """
    conf = cfg.to_json().encode("utf-8")
    parts = [MAGIC, struct.pack("<II", CONTAINER_VERSION, len(conf)), conf, struct.pack("<I", len(seqs))]
    for s in seqs:
        n, d = s.tokens.shape
        parts.append(_SEQ_HEADER.pack(n, d, len(s.query_positions), s.beta))
        parts.append(np.ascontiguousarray(s.tokens, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(s.entity_flags, dtype="u1").tobytes())
        parts.append(np.ascontiguousarray(s.entropy, dtype="<f8").tobytes())
        for arr in (s.query_positions, s.sources, s.labels):
            parts.append(np.ascontiguousarray(arr, dtype="<i8").tobytes())
    return b"".join(parts)


def from_bytes(blob: bytes) -> tuple[TaskConfig, list[TaskSequence]]:
    if blob[:8] != MAGIC:
        raise ValueError("not a VORTSEQ1 container")
    off = 8
    version, clen = struct.unpack_from("<II", blob, off)
    off += 8
    if version != CONTAINER_VERSION:
        raise ValueError(f"unsupported container version {version}")
    cfg = TaskConfig(**json.loads(blob[off : off + clen].decode("utf-8")))
    off += clen
    (count,) = struct.unpack_from("<I", blob, off)
    off += 4

    def take(dtype, k):
        nonlocal off
        arr = np.frombuffer(blob, dtype=dtype, count=k, offset=off).copy()
        off += arr.nbytes
        return arr

    seqs = []
    for _ in range(count):
        n, d, Q, beta = _SEQ_HEADER.unpack_from(blob, off)
        off += _SEQ_HEADER.size
        tokens = take("<f8", n * d).reshape(n, d)
        flags = take("u1", n)
        entropy = take("<f8", n)
        pos, src, lab = (take("<i8", Q).astype(np.int64) for _ in range(3))
        seqs.append(TaskSequence(tokens, pos, src, lab, flags, entropy, beta=beta))
    if off != len(blob):
        raise ValueError("trailing bytes after the last sequence")
    return cfg, seqs


def to_json(seqs: list[TaskSequence], cfg: TaskConfig) -> str:
    """Human-readable dump (queries and metadata; tokens included)."""
    return json.dumps(
        {
            "config": json.loads(cfg.to_json()),
            "sequences": [
                {
                    "beta": s.beta,
                    "tokens": s.tokens.tolist(),
                    "entity_flags": s.entity_flags.tolist(),
                    "entropy": s.entropy.tolist(),
                    "query_positions": s.query_positions.tolist(),
                    "sources": s.sources.tolist(),
                    "labels": s.labels.tolist(),
                    "lags": s.lags.tolist(),
                }
                for s in seqs
            ],
        },
        sort_keys=True,
    )
