"""Encoder-decoder transformer denoiser with trend / seasonal / residual heads.

The network predicts the clean window directly (x0-parameterization)::

    x0_hat = trend + seasonal[0] + ... + seasonal[n_dec - 1] + residual

where each decoder block contributes one polynomial trend term and one
Fourier-synthesised seasonal term, and the residual is a linear read-out of
the final decoder states. The sum is evaluated left to right in exactly that
order, so the returned parts reproduce ``x0_hat`` bit for bit.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from functools import lru_cache

import numpy as np

from . import tensor as T
from .nn import MLP, AdaLayerNorm, Linear, Module, MultiHeadAttention, TimestepEmbedding, sinusoidal_features
from .tensor import DiffTensor


@dataclass
class DenoiserConfig:
    d: int
    n_enc: int = 3
    n_dec: int = 2
    h_dim: int = 96
    n_heads: int = 4
    poly_degree: int = 3
    k_freq: int = 5
    pool: int = 4
    mlp_ratio: int = 4
    time_base: float = 10000.0

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# fixed bases
# ---------------------------------------------------------------------------

def poly_basis(T_win: int, degree: int) -> np.ndarray:
    """C[n, j] = (n / T_win) ** j for n < T_win, j <= degree."""
    n = np.arange(T_win, dtype=np.float64)[:, None] / T_win
    return n ** np.arange(degree + 1)[None, :]


@lru_cache(maxsize=64)
def _trend_operators(T_win: int, degree: int, pool: int) -> tuple[np.ndarray, np.ndarray]:
    """(pooling matrix L x T_win, least-squares map (degree+1) x L) for one window length."""
    L = -(-T_win // pool)
    P = np.zeros((L, T_win))
    for i in range(L):
        lo, hi = i * pool, min((i + 1) * pool, T_win)
        P[i, lo:hi] = 1.0 / (hi - lo)
    centers = P @ np.arange(T_win, dtype=np.float64)
    C_pool = (centers[:, None] / T_win) ** np.arange(degree + 1)[None, :]
    return P, np.linalg.pinv(C_pool)


def trend_synthesis(coeff, T_win: int) -> DiffTensor:
    """Evaluate polynomial coefficients ((..., p+1, d)) on the window grid -> (..., T_win, d)."""
    coeff = coeff if isinstance(coeff, DiffTensor) else DiffTensor(coeff)
    p = coeff.shape[-2] - 1
    if p < 1:
        raise ValueError(f"trend_synthesis: polynomial degree must be >= 1, got {p}")
    C = poly_basis(T_win, p).astype(coeff.dtype)
    return T.matmul(DiffTensor(C), coeff)


def fourier_synthesis(block_repr, k_freq: int) -> DiffTensor:
    """Keep the DC bin plus the ``k_freq`` strongest bins per channel along time (axis -2).

    Bin selection is computed from the current values and held constant, so
    gradients flow only through the retained bins.
    """
    x = block_repr if isinstance(block_repr, DiffTensor) else DiffTensor(block_repr)
    n = x.shape[-2]
    if not 1 <= k_freq <= n // 2:
        raise ValueError(f"fourier_synthesis: k_freq={k_freq} outside [1, {n // 2}] for length {n}")
    spec = T.rfft(x, axis=-2)  # (..., F, d, 2)
    mag = np.hypot(spec.data[..., 0], spec.data[..., 1])
    _, idx = T.topk(mag[..., 1:, :], k_freq, axis=-2)
    mask = np.zeros(mag.shape, dtype=x.dtype)
    np.put_along_axis(mask, idx + 1, 1.0, axis=-2)
    mask[..., 0, :] = 1.0
    return T.irfft(spec * mask[..., None], n=n, axis=spec.ndim - 3)


def positional_features(T_win: int, dim: int) -> np.ndarray:
    return sinusoidal_features(np.arange(T_win), dim)


# ---------------------------------------------------------------------------
# blocks
# ---------------------------------------------------------------------------

class EncoderBlock(Module):
    def __init__(self, cfg: DenoiserConfig, rng):
        h = cfg.h_dim
        self.norm1 = AdaLayerNorm(h, rng)
        self.attn = MultiHeadAttention(h, cfg.n_heads, rng)
        self.norm2 = AdaLayerNorm(h, rng)
        self.mlp = MLP(h, cfg.mlp_ratio * h, rng)

    def __call__(self, x, emb):
        x = x + self.attn(self.norm1(x, emb))
        return x + self.mlp(self.norm2(x, emb))


class DecoderBlock(Module):
    def __init__(self, cfg: DenoiserConfig, rng, head_scale: float):
        h, d = cfg.h_dim, cfg.d
        self.cfg = cfg
        self.norm1 = AdaLayerNorm(h, rng)
        self.self_attn = MultiHeadAttention(h, cfg.n_heads, rng)
        self.norm2 = AdaLayerNorm(h, rng)
        self.cross_attn = MultiHeadAttention(h, cfg.n_heads, rng)
        self.norm3 = AdaLayerNorm(h, rng)
        self.mlp = MLP(h, cfg.mlp_ratio * h, rng)
        self.trend_head = Linear(h, d, rng, init_scale=head_scale)
        self.season_head = Linear(h, d, rng, init_scale=head_scale)

    def __call__(self, x, enc, emb):
        x = x + self.self_attn(self.norm1(x, emb))
        x = x + self.cross_attn(self.norm2(x, emb), enc)
        x = x + self.mlp(self.norm3(x, emb))
        return x, self.trend(x), self.seasonal(x)

    def trend(self, x: DiffTensor) -> DiffTensor:
        T_win = x.shape[-2]
        P, lsq = _trend_operators(T_win, self.cfg.poly_degree, self.cfg.pool)
        pooled = DiffTensor(P.astype(x.dtype)) @ x  # low-frequency token sequence
        coeff = DiffTensor(lsq.astype(x.dtype)) @ self.trend_head(pooled)
        return trend_synthesis(coeff, T_win)

    def seasonal(self, x: DiffTensor) -> DiffTensor:
        return fourier_synthesis(self.season_head(x), self.cfg.k_freq)


class DenoiserModel(Module):
    """x0-predicting denoiser. ``zero_heads`` zero-initialises every output head."""

    def __init__(self, cfg: DenoiserConfig, rng: np.random.Generator, zero_heads: bool = False):
        self.cfg = cfg
        h = cfg.h_dim
        head_scale = 0.0 if zero_heads else 1.0
        self.in_proj = Linear(cfg.d, h, rng)
        self.t_embed = TimestepEmbedding(h, rng, cfg.time_base)
        self.encoder = [EncoderBlock(cfg, rng) for _ in range(cfg.n_enc)]
        self.decoder = [DecoderBlock(cfg, rng, head_scale) for _ in range(cfg.n_dec)]
        self.residual_head = Linear(h, cfg.d, rng, init_scale=head_scale)

    def __call__(self, x_t, t):
        return denoise(x_t, t, self)


def denoise(x_t, t, model: DenoiserModel):
    """Predict the clean window from ``x_t`` at step(s) ``t``.

    ``x_t`` is (T_win, d) or (B, T_win, d); ``t`` an int or a length-B array.
    Returns ``(x0_hat, parts)`` with parts ``{"trend", "seasonal", "residual"}``.
    """
    cfg = model.cfg
    x = x_t if isinstance(x_t, DiffTensor) else DiffTensor(np.asarray(x_t, dtype=model.dtype))
    single = x.ndim == 2
    if single:
        x = x.reshape(1, *x.shape)
    if x.ndim != 3:
        raise ValueError(f"denoise: expected (T_win, d) or (B, T_win, d), got {x.shape}")
    B, T_win, d = x.shape
    if d != cfg.d:
        raise ValueError(f"denoise: input has {d} channels, model expects {cfg.d}")
    if T_win < 8:
        raise ValueError(f"denoise: window length {T_win} < 8")
    t_arr = np.broadcast_to(np.asarray(t), (B,))
    if t_arr.min() < 1:
        raise ValueError(f"denoise: step must be >= 1, got {t_arr.min()}")

    emb = model.t_embed(t_arr)
    pos = DiffTensor(positional_features(T_win, cfg.h_dim).astype(x.dtype))
    tokens = model.in_proj(x) + pos
    enc = tokens
    for blk in model.encoder:
        enc = blk(enc, emb)
    h = tokens
    trend = None
    seasonal = []
    for blk in model.decoder:
        h, tr, se = blk(h, enc, emb)
        trend = tr if trend is None else trend + tr
        seasonal.append(se)
    residual = model.residual_head(h)

    out = trend
    for s in seasonal:
        out = out + s
    out = out + residual
    parts = {"trend": trend, "seasonal": seasonal, "residual": residual}
    if single:
        out = out.reshape(T_win, d)
        parts = {
            "trend": trend.reshape(T_win, d),
            "seasonal": [s.reshape(T_win, d) for s in seasonal],
            "residual": residual.reshape(T_win, d),
        }
    return out, parts


def ada_layer_norm(h, t_emb, norm: AdaLayerNorm) -> DiffTensor:
    """scale(t) * layer_norm(h) + shift(t) using the projections held by ``norm``."""
    return norm(h, t_emb)
