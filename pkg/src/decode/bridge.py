"""Contrastive text-signal bridge.

Frozen text vectors (one per event label) are projected into a shared
unit-sphere space; a small convolutional encoder maps signal windows into the
same space. InfoNCE against all K label embeddings trains both sides, and the
resulting similarity logits give per-event log-probabilities for guidance.
"""

from __future__ import annotations

import json
import logging
import math
import warnings
from pathlib import Path

import numpy as np

from . import tensor as T
from .nn import Linear, Module, param
from .tensor import DiffTensor

log = logging.getLogger(__name__)

DRIVING_EVENTS = ("braking", "turning", "lane changing", "acceleration", "stable driving")
FIXTURE_DIM = 1024
FIXTURE_SEED = 20240601


class EmbeddingTable(Module):
    """Event labels, their frozen raw vectors, and the learned projection + temperature."""

    def __init__(self, labels, raw_vectors, d_emb: int = 64, rng: np.random.Generator | None = None,
                 tau: float = 0.07):
        labels = list(labels)
        raw = np.asarray(raw_vectors, dtype=np.float64)
        if not labels:
            raise ValueError("embedding table is empty")
        if len(set(labels)) != len(labels):
            dupes = sorted({l for l in labels if labels.count(l) > 1})
            raise ValueError(f"duplicate labels: {dupes}")
        if raw.ndim != 2 or raw.shape[0] != len(labels):
            raise ValueError(f"expected {len(labels)} raw vectors, got array of shape {raw.shape}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.labels = labels
        self.raw = raw  # frozen
        d_raw = raw.shape[1]
        bound = math.sqrt(3.0 / d_raw)  # unit-variance-preserving uniform
        self.W_proj = param(rng.uniform(-bound, bound, size=(d_emb, d_raw)))
        self.b_proj = param(np.zeros(d_emb))
        self.log_tau = param(np.array(math.log(tau)))

    @property
    def K(self) -> int:
        return len(self.labels)

    @property
    def d_emb(self) -> int:
        return self.W_proj.shape[0]

    @property
    def tau(self) -> DiffTensor:
        return T.exp(self.log_tau)

    def index(self, label: str) -> int:
        try:
            return self.labels.index(label)
        except ValueError:
            raise KeyError(f"unknown event {label!r}; known labels: {', '.join(self.labels)}") from None


def load_embedding_file(path) -> tuple[list[str], np.ndarray]:
    """Parse a ``{label: [floats]}`` JSON file, validating shape and uniqueness."""
    text = Path(path).read_text(encoding="utf-8")
    if not text.strip():
        raise ValueError(f"{path}: empty embedding file")
    pairs = json.loads(text, object_pairs_hook=list)
    if not isinstance(pairs, list) or not pairs:
        raise ValueError(f"{path}: expected a non-empty JSON object of label -> vector")
    labels = [k for k, _ in pairs]
    if len(set(labels)) != len(labels):
        dupes = sorted({l for l in labels if labels.count(l) > 1})
        raise ValueError(f"{path}: duplicate labels {dupes}")
    dims = {k: len(v) for k, v in pairs}
    if len(set(dims.values())) != 1:
        raise ValueError(f"{path}: vector dimension mismatch {dims}")
    raw = np.array([v for _, v in pairs], dtype=np.float64)
    if raw.shape[1] == 0:
        raise ValueError(f"{path}: zero-length vectors")
    return labels, raw


def import_embeddings(path, d_emb: int = 64, rng: np.random.Generator | None = None,
                      tau: float = 0.07) -> EmbeddingTable:
    labels, raw = load_embedding_file(path)
    _warn_collisions(labels, raw)
    return EmbeddingTable(labels, raw, d_emb=d_emb, rng=rng, tau=tau)


def _warn_collisions(labels, raw) -> list[tuple[str, str]]:
    norms = np.linalg.norm(raw, axis=1)
    unit = raw / np.where(norms > 0, norms, 1.0)[:, None]
    cos = unit @ unit.T
    pairs = [(labels[i], labels[j]) for i in range(len(labels)) for j in range(i + 1, len(labels))
             if cos[i, j] >= 1.0 - 1e-12]
    for a, b in pairs:
        warnings.warn(f"labels {a!r} and {b!r} have identical text vectors; classes are indistinguishable",
                      stacklevel=3)
    return pairs


def fixture_embeddings(labels=DRIVING_EVENTS, dim: int = FIXTURE_DIM, seed: int = FIXTURE_SEED) -> dict:
    """Deterministic stand-in for pooled sentence-encoder outputs (tanh-range values)."""
    out = {}
    for i, label in enumerate(labels):
        rng = np.random.default_rng([seed, i])
        out[label] = np.tanh(rng.standard_normal(dim)).round(6).tolist()
    return out


def fixture_path() -> Path:
    return Path(__file__).parent / "data" / "driving5_embeddings.json"


def project_text(table: EmbeddingTable) -> DiffTensor:
    """K x d_emb unit-norm text embeddings."""
    z = DiffTensor(table.raw.astype(table.W_proj.dtype)) @ T.transpose(table.W_proj) + table.b_proj
    norms = np.linalg.norm(z.data, axis=-1)
    if np.any(norms < 1e-12):
        bad = [table.labels[i] for i in np.flatnonzero(norms < 1e-12)]
        raise ValueError(f"project_text: zero vector before normalization for {bad}")
    return T.l2_normalize(z, axis=-1)


class SignalEncoder(Module):
    """Strided 1-D conv stack -> global average pool -> projection -> unit sphere."""

    def __init__(self, d: int, d_emb: int = 64, widths=(32, 64), kernel: int = 5,
                 stride: int = 2, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.kernel, self.stride = kernel, stride
        c_in = d
        for i, w in enumerate(widths):
            bound = 1.0 / math.sqrt(c_in * kernel)
            setattr(self, f"conv{i}_w", param(rng.uniform(-bound, bound, size=(w, c_in, kernel))))
            setattr(self, f"conv{i}_b", param(np.zeros(w)))
            c_in = w
        self.n_layers = len(widths)
        self.d = d
        self.proj = Linear(c_in, d_emb, rng)

    @property
    def min_length(self) -> int:
        return self.kernel

    def __call__(self, x) -> DiffTensor:
        return encode_signal(x, self)


def encode_signal(x, enc: SignalEncoder) -> DiffTensor:
    """Unit-norm embedding of a (T_win, d) window, or (B, d_emb) for a (B, T_win, d) batch."""
    x = x if isinstance(x, DiffTensor) else DiffTensor(np.asarray(x, dtype=enc.dtype))
    single = x.ndim == 2
    if single:
        x = x.reshape(1, *x.shape)
    if x.shape[-1] != enc.d:
        raise ValueError(f"encode_signal: input has {x.shape[-1]} channels, encoder expects {enc.d}")
    if x.shape[1] < enc.min_length:
        raise ValueError(f"encode_signal: input length {x.shape[1]} below minimum length {enc.min_length}")
    h = T.transpose(x, (0, 2, 1))
    for i in range(enc.n_layers):
        w = getattr(enc, f"conv{i}_w")
        b = getattr(enc, f"conv{i}_b")
        h = T.silu(T.conv1d(h, w, b, stride=enc.stride, padding=enc.kernel // 2))
    pooled = T.mean(h, axis=2)
    e = T.l2_normalize(enc.proj(pooled), axis=-1)
    return e.reshape(e.shape[-1]) if single else e


def info_nce(e_ts, E_text, labels, tau) -> DiffTensor:
    """Mean over the batch of -log softmax(e_ts . E_text^T / tau)[label]."""
    e_ts = e_ts if isinstance(e_ts, DiffTensor) else DiffTensor(e_ts)
    E_text = E_text if isinstance(E_text, DiffTensor) else DiffTensor(E_text)
    labels = np.asarray(labels, dtype=np.int64)
    if e_ts.ndim == 1:
        e_ts = e_ts.reshape(1, -1)
    B, K = e_ts.shape[0], E_text.shape[0]
    if B == 0:
        raise ValueError("info_nce: empty batch")
    if labels.shape != (B,):
        raise ValueError(f"info_nce: {labels.shape} labels for batch of {B}")
    if labels.min() < 0 or labels.max() >= K:
        raise ValueError(f"info_nce: labels must be in [0, {K})")
    logits = (e_ts @ T.transpose(E_text)) / tau
    lp = T.log_softmax(logits, axis=-1)
    return 0.0 - T.mean(lp[np.arange(B), labels])


class SemanticBridge(Module):
    """Embedding table + signal encoder trained together."""

    def __init__(self, table: EmbeddingTable, encoder: SignalEncoder):
        self.table = table
        self.encoder = encoder

    @property
    def labels(self) -> list[str]:
        return self.table.labels

    def log_probs(self, x) -> DiffTensor:
        return class_log_probs(x, self.table, self.encoder)


def class_log_probs(x, table: EmbeddingTable, enc: SignalEncoder) -> DiffTensor:
    """log softmax over events of f_ts(x) . E_text^T / tau; (K,) or (B, K)."""
    e = encode_signal(x, enc)
    single = e.ndim == 1
    if single:
        e = e.reshape(1, -1)
    E = project_text(table)
    lp = T.log_softmax((e @ T.transpose(E)) / table.tau, axis=-1)
    return lp.reshape(lp.shape[-1]) if single else lp
