"""Small layer library on top of :mod:`decode.tensor`."""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .tensor import DiffTensor


class Module:
    """Parameter container; parameters are DiffTensors with ``requires_grad``."""

    def named_parameters(self, prefix: str = ""):
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, DiffTensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self) -> list[DiffTensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = sorted(set(params) - set(state))
        unexpected = sorted(set(state) - set(params))
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={missing} unexpected={unexpected}")
        for name, p in params.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self

    @property
    def dtype(self):
        params = self.parameters()
        return params[0].dtype if params else np.float64


def param(arr) -> DiffTensor:
    return DiffTensor(np.asarray(arr, dtype=np.float64), requires_grad=True)


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, init_scale: float = 1.0):
        bound = init_scale / math.sqrt(n_in)
        self.weight = param(rng.uniform(-bound, bound, size=(n_in, n_out)))
        self.bias = param(np.zeros(n_out))

    def __call__(self, x) -> DiffTensor:
        return x @ self.weight + self.bias


class MLP(Module):
    def __init__(self, dim: int, hidden: int, rng: np.random.Generator):
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, dim, rng)

    def __call__(self, x) -> DiffTensor:
        return self.fc2(T.silu(self.fc1(x)))


class MultiHeadAttention(Module):
    def __init__(self, dim: int, n_heads: int, rng: np.random.Generator):
        if dim % n_heads:
            raise ValueError(f"hidden width {dim} not divisible by {n_heads} heads")
        self.n_heads = n_heads
        self.q = Linear(dim, dim, rng)
        self.k = Linear(dim, dim, rng)
        self.v = Linear(dim, dim, rng)
        self.out = Linear(dim, dim, rng)

    def _split(self, x: DiffTensor) -> DiffTensor:
        B, L, D = x.shape
        return T.transpose(x.reshape(B, L, self.n_heads, D // self.n_heads), (0, 2, 1, 3))

    def __call__(self, x: DiffTensor, context: DiffTensor | None = None) -> DiffTensor:
        context = x if context is None else context
        B, L, D = x.shape
        q = self._split(self.q(x))
        k = self._split(self.k(context))
        v = self._split(self.v(context))
        scale = np.asarray(1.0 / math.sqrt(D // self.n_heads), dtype=x.dtype)
        att = T.softmax((q @ T.transpose(k, (0, 1, 3, 2))) * scale, axis=-1)
        y = T.transpose(att @ v, (0, 2, 1, 3)).reshape(B, L, D)
        return self.out(y)


class AdaLayerNorm(Module):
    """Layer norm whose scale and shift are predicted from a timestep embedding."""

    def __init__(self, dim: int, rng: np.random.Generator, eps: float = 1e-5):
        self.eps = eps
        self.proj = Linear(dim, 2 * dim, rng, init_scale=0.5)

    def modulation(self, emb: DiffTensor) -> tuple[DiffTensor, DiffTensor]:
        """(scale, shift), each (B, 1, dim)."""
        ss = self.proj(T.silu(emb))
        dim = ss.shape[-1] // 2
        B = ss.shape[0]
        scale = 1.0 + ss[:, :dim].reshape(B, 1, dim)
        shift = ss[:, dim:].reshape(B, 1, dim)
        return scale, shift

    def __call__(self, h: DiffTensor, emb: DiffTensor) -> DiffTensor:
        scale, shift = self.modulation(emb)
        return T.layer_norm(h, axis=-1, eps=self.eps) * scale + shift


def sinusoidal_features(positions, dim: int, base: float = 10000.0) -> np.ndarray:
    """Transformer-style sin/cos features, shape ``positions.shape + (dim,)``."""
    pos = np.asarray(positions, dtype=np.float64)[..., None]
    half = dim // 2
    freqs = np.exp(-math.log(base) * np.arange(half) / max(half, 1))
    ang = pos * freqs
    feats = np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)
    if dim % 2:
        feats = np.concatenate([feats, np.zeros(feats.shape[:-1] + (1,))], axis=-1)
    return feats


class TimestepEmbedding(Module):
    """Sinusoidal step features followed by a two-layer learned map."""

    def __init__(self, dim: int, rng: np.random.Generator, base: float = 10000.0):
        self.dim = dim
        self.base = base
        self.fc1 = Linear(dim, 2 * dim, rng)
        self.fc2 = Linear(2 * dim, dim, rng)

    def __call__(self, t) -> DiffTensor:
        t = np.atleast_1d(np.asarray(t))
        feats = sinusoidal_features(t, self.dim, self.base).astype(self.fc1.weight.dtype)
        return self.fc2(T.silu(self.fc1(DiffTensor(feats))))
