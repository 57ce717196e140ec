"""Minimal reverse-mode autodiff over numpy arrays.

Every differentiable computation in the package (denoiser, semantic bridge,
guidance gradients) runs on :class:`DiffTensor`. A forward pass records one
node per primitive; :func:`backward` collects the nodes reachable from a
scalar loss into a :class:`GradTape`, replays it in reverse topological order
and then releases it. Tapes are single-pass: a second ``backward`` through the
same graph raises unless ``retain_graph=True`` was passed the first time.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "DiffTensor",
    "GradTape",
    "ShapeError",
    "backward",
    "grad_check",
    "no_grad",
    "debug_mode",
    "tensor",
    "add", "sub", "mul", "div", "neg", "power", "matmul", "transpose",
    "reshape", "concat", "take", "sum", "mean", "abs", "exp", "log", "sqrt",
    "relu", "silu", "tanh", "softmax", "log_softmax", "layer_norm", "conv1d",
    "embedding", "topk", "rfft", "irfft", "l2_normalize",
]


class ShapeError(ValueError):
    """Operand shapes do not conform for a primitive."""


_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


def _debug() -> bool:
    return getattr(_state, "debug", False)


@contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


@contextmanager
def debug_mode(enabled: bool = True):
    """Check every primitive's inputs for NaN while active."""
    prev = _debug()
    _state.debug = enabled
    try:
        yield
    finally:
        _state.debug = prev


class DiffTensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op", "_consumed")

    __array_ufunc__ = None  # ndarray <op> DiffTensor defers to the reflected operator

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[DiffTensor, ...] = ()
        self._backward: Callable | None = None
        self._op = "leaf"
        self._consumed = False

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "DiffTensor":
        return DiffTensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"DiffTensor({np.array2string(self.data, precision=4, threshold=8)}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operator sugar ------------------------------------------------
    def __add__(self, o): return add(self, o)
    def __radd__(self, o): return add(o, self)
    def __sub__(self, o): return sub(self, o)
    def __rsub__(self, o): return sub(o, self)
    def __mul__(self, o): return mul(self, o)
    def __rmul__(self, o): return mul(o, self)
    def __truediv__(self, o): return div(self, o)
    def __rtruediv__(self, o): return div(o, self)
    def __neg__(self): return neg(self)
    def __pow__(self, p): return power(self, p)
    def __matmul__(self, o): return matmul(self, o)
    def __rmatmul__(self, o): return matmul(o, self)
    def __getitem__(self, idx): return take(self, idx)

    def sum(self, axis=None, keepdims=False): return sum(self, axis, keepdims)
    def mean(self, axis=None, keepdims=False): return mean(self, axis, keepdims)
    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)
    def transpose(self, *axes): return transpose(self, axes or None)
    def abs(self): return abs(self)
    def exp(self): return exp(self)
    def log(self): return log(self)
    def sqrt(self): return sqrt(self)

    @property
    def T(self): return transpose(self)

    def backward(self, retain_graph: bool = False) -> None:
        backward(self, retain_graph=retain_graph)


def tensor(data, requires_grad: bool = False, dtype=None) -> DiffTensor:
    return DiffTensor(data, requires_grad=requires_grad, dtype=dtype)


def _as_tensor(x, like: DiffTensor | None = None) -> DiffTensor:
    if isinstance(x, DiffTensor):
        return x
    dtype = like.dtype if like is not None else None
    return DiffTensor(np.asarray(x, dtype=dtype))


def _pair(a, b) -> tuple[DiffTensor, DiffTensor]:
    """Promote a constant operand to the other operand's dtype (no silent upcast)."""
    if isinstance(a, DiffTensor) and not isinstance(b, DiffTensor):
        return a, _as_tensor(b, like=a)
    if isinstance(b, DiffTensor) and not isinstance(a, DiffTensor):
        return _as_tensor(a, like=b), b
    return _as_tensor(a), _as_tensor(b)


def _make(op: str, data: np.ndarray, parents: Sequence[DiffTensor], grad_fn: Callable) -> DiffTensor:
    out = DiffTensor(data)
    out._op = op
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = grad_fn
    return out


def _check_nan(op: str, *ts: DiffTensor) -> None:
    if _debug():
        for t in ts:
            if np.isnan(t.data).any():
                raise FloatingPointError(f"{op}: NaN in input of shape {t.shape}")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _broadcast_shape(op: str, a: DiffTensor, b: DiffTensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------------------
# tape
# ---------------------------------------------------------------------------

class GradTape:
    """Reverse-topological record of the nodes reachable from a loss."""

    def __init__(self, nodes: list[DiffTensor]):
        self.nodes = nodes  # topological order, loss last

    @classmethod
    def from_loss(cls, loss: DiffTensor) -> "GradTape":
        order: list[DiffTensor] = []
        seen: set[int] = set()
        stack: list[tuple[DiffTensor, bool]] = [(loss, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)

    def replay(self, seed_grad: np.ndarray) -> None:
        grads: dict[int, np.ndarray] = {id(self.nodes[-1]): seed_grad}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            node.grad = g
            parent_grads = node._backward(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    def clear(self) -> None:
        for node in self.nodes:
            if node._parents:
                node._parents = ()
                node._backward = None
                node._consumed = True
        self.nodes = []


def backward(loss: DiffTensor, retain_graph: bool = False) -> None:
    """Populate ``.grad`` on every tensor reachable from scalar ``loss``."""
    if loss._consumed:
        raise RuntimeError("backward: graph already consumed (single-pass tape)")
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise RuntimeError("backward: loss does not depend on any tensor requiring grad")
    if loss.is_leaf:
        loss.grad = np.ones_like(loss.data)
        return
    tape = GradTape.from_loss(loss)
    tape.replay(np.ones_like(loss.data))
    if not retain_graph:
        tape.clear()


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> DiffTensor:
    a, b = _pair(a, b)
    _broadcast_shape("add", a, b)
    _check_nan("add", a, b)
    sa, sb = a.shape, b.shape
    return _make("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> DiffTensor:
    a, b = _pair(a, b)
    _broadcast_shape("sub", a, b)
    _check_nan("sub", a, b)
    sa, sb = a.shape, b.shape
    return _make("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> DiffTensor:
    a, b = _pair(a, b)
    _broadcast_shape("mul", a, b)
    _check_nan("mul", a, b)
    ad, bd = a.data, b.data

    def grad_fn(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return _make("mul", ad * bd, (a, b), grad_fn)


def div(a, b) -> DiffTensor:
    a, b = _pair(a, b)
    _broadcast_shape("div", a, b)
    _check_nan("div", a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def grad_fn(g):
        ga = _unbroadcast(g / bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None
        return ga, gb

    return _make("div", out, (a, b), grad_fn)


def neg(a) -> DiffTensor:
    a = _as_tensor(a)
    return _make("neg", -a.data, (a,), lambda g: (-g,))


def power(a, p: float) -> DiffTensor:
    """Elementwise ``a ** p`` for a constant real exponent."""
    a = _as_tensor(a)
    if isinstance(p, DiffTensor):
        raise TypeError("power: exponent must be a constant")
    _check_nan("power", a)
    ad = a.data
    return _make("power", ad ** p, (a,), lambda g: (g * p * ad ** (p - 1),))


def abs(a) -> DiffTensor:
    a = _as_tensor(a)
    _check_nan("abs", a)
    sign = np.sign(a.data)  # subgradient 0 at 0
    return _make("abs", np.abs(a.data), (a,), lambda g: (g * sign,))


def exp(a) -> DiffTensor:
    a = _as_tensor(a)
    _check_nan("exp", a)
    out = np.exp(a.data)
    return _make("exp", out, (a,), lambda g: (g * out,))


def log(a) -> DiffTensor:
    a = _as_tensor(a)
    _check_nan("log", a)
    ad = a.data
    return _make("log", np.log(ad), (a,), lambda g: (g / ad,))


def sqrt(a) -> DiffTensor:
    a = _as_tensor(a)
    _check_nan("sqrt", a)
    out = np.sqrt(a.data)
    return _make("sqrt", out, (a,), lambda g: (g * 0.5 / out,))


def relu(a) -> DiffTensor:
    a = _as_tensor(a)
    mask = a.data > 0
    return _make("relu", a.data * mask, (a,), lambda g: (g * mask,))


def silu(a) -> DiffTensor:
    a = _as_tensor(a)
    _check_nan("silu", a)
    ad = a.data
    sig = 1.0 / (1.0 + np.exp(-ad))
    return _make("silu", ad * sig, (a,), lambda g: (g * sig * (1.0 + ad * (1.0 - sig)),))


def tanh(a) -> DiffTensor:
    a = _as_tensor(a)
    out = np.tanh(a.data)
    return _make("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------

def matmul(a, b) -> DiffTensor:
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch dims of {a.shape} and {b.shape} do not broadcast") from None
    _check_nan("matmul", a, b)
    ad, bd = a.data, b.data

    def grad_fn(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return _make("matmul", ad @ bd, (a, b), grad_fn)


def transpose(a, axes=None) -> DiffTensor:
    a = _as_tensor(a)
    if axes is None:
        axes = tuple(range(a.ndim))[::-1]
    axes = tuple(ax % a.ndim for ax in axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for shape {a.shape}")
    inv = tuple(np.argsort(axes))
    return _make("transpose", np.transpose(a.data, axes), (a,),
                 lambda g: (np.transpose(g, inv),))


def swapaxes(a, i: int, j: int) -> DiffTensor:
    a = _as_tensor(a)
    axes = list(range(a.ndim))
    axes[i], axes[j] = axes[j], axes[i]
    return transpose(a, axes)


def reshape(a, shape) -> DiffTensor:
    a = _as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {tuple(shape)}") from None
    src = a.shape
    return _make("reshape", out, (a,), lambda g: (g.reshape(src),))


def concat(tensors: Sequence, axis: int = 0) -> DiffTensor:
    ts = [_as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat: no inputs")
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: shapes {[t.shape for t in ts]} do not conform on axis {axis}") from None
    bounds = np.cumsum([0] + [t.shape[axis] for t in ts])

    def grad_fn(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis)
                     for i in range(len(ts)))

    return _make("concat", out, ts, grad_fn)


def take(a, idx) -> DiffTensor:
    """Basic or advanced indexing (``a[idx]``), the slice primitive."""
    a = _as_tensor(a)
    if isinstance(idx, DiffTensor):
        raise TypeError("take: index must not be a DiffTensor")
    try:
        out = a.data[idx]
    except IndexError as exc:
        raise ShapeError(f"slice: index {idx!r} invalid for shape {a.shape}: {exc}") from None
    shape, dtype = a.shape, a.dtype
    basic = _is_basic_index(idx)

    def grad_fn(g):
        full = np.zeros(shape, dtype=dtype)
        if basic:
            full[idx] += g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _make("slice", np.array(out, copy=True) if basic else out, (a,), grad_fn)


def _is_basic_index(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(p, (slice, int, np.integer)) or p is None or p is Ellipsis for p in parts)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def _expand(g: np.ndarray, shape, axis, keepdims: bool) -> np.ndarray:
    if axis is not None and not keepdims:
        axes = (axis,) if np.isscalar(axis) else tuple(axis)
        axes = tuple(ax % len(shape) for ax in axes)
        for ax in sorted(axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def sum(a, axis=None, keepdims: bool = False) -> DiffTensor:
    a = _as_tensor(a)
    shape = a.shape
    out = np.sum(a.data, axis=axis, keepdims=keepdims)
    return _make("sum", np.asarray(out), (a,),
                 lambda g: (_expand(g, shape, axis, keepdims).copy(),))


def mean(a, axis=None, keepdims: bool = False) -> DiffTensor:
    a = _as_tensor(a)
    shape = a.shape
    out = np.mean(a.data, axis=axis, keepdims=keepdims)
    n = a.size / max(np.asarray(out).size, 1) if a.size else 1.0
    return _make("mean", np.asarray(out), (a,),
                 lambda g: (_expand(g, shape, axis, keepdims) / n,))


# ---------------------------------------------------------------------------
# normalizations
# ---------------------------------------------------------------------------

def softmax(a, axis: int = -1) -> DiffTensor:
    a = _as_tensor(a)
    _check_nan("softmax", a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make("softmax", out, (a,), grad_fn)


def log_softmax(a, axis: int = -1) -> DiffTensor:
    a = _as_tensor(a)
    _check_nan("log_softmax", a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def grad_fn(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _make("log_softmax", out, (a,), grad_fn)


def layer_norm(a, axis: int = -1, eps: float = 1e-5) -> DiffTensor:
    """Zero-mean, unit-variance normalization over ``axis`` (no affine)."""
    a = _as_tensor(a)
    _check_nan("layer_norm", a)
    mu = a.data.mean(axis=axis, keepdims=True)
    xc = a.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=axis, keepdims=True) + eps)
    xhat = xc * inv

    def grad_fn(g):
        gm = g.mean(axis=axis, keepdims=True)
        gx = (g * xhat).mean(axis=axis, keepdims=True)
        return (inv * (g - gm - xhat * gx),)

    return _make("layer_norm", xhat, (a,), grad_fn)


def l2_normalize(a, axis: int = -1, min_norm: float = 1e-12) -> DiffTensor:
    a = _as_tensor(a)
    norm = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=True))
    if np.any(norm < min_norm):
        raise ValueError(f"l2_normalize: vector norm below {min_norm:g}")
    return a / sqrt(sum(a * a, axis=axis, keepdims=True))


# ---------------------------------------------------------------------------
# convolution / lookup / selection
# ---------------------------------------------------------------------------

def conv1d(x, w, b=None, stride: int = 1, padding: int = 0) -> DiffTensor:
    """Cross-correlation of ``x`` (B, C_in, L) with ``w`` (C_out, C_in, K)."""
    x, w = _as_tensor(x), _as_tensor(w)
    if x.ndim != 3 or w.ndim != 3 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv1d: input {x.shape} and kernel {w.shape} do not conform")
    if stride < 1 or padding < 0:
        raise ValueError("conv1d: stride must be >= 1 and padding >= 0")
    _check_nan("conv1d", x, w)
    B, C, L = x.shape
    K = w.shape[2]
    Lp = L + 2 * padding
    if Lp < K:
        raise ShapeError(f"conv1d: input length {L} (+2*{padding} padding) shorter than kernel {K}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding))) if padding else x.data
    cols = np.lib.stride_tricks.sliding_window_view(xp, K, axis=2)[:, :, ::stride, :]
    L_out = cols.shape[2]
    out = np.einsum("bclk,ock->bol", cols, w.data, optimize=True)
    parents = [x, w]
    if b is not None:
        b = _as_tensor(b)
        out = out + b.data[None, :, None]
        parents.append(b)
    wd = w.data

    def grad_fn(g):
        gx = gw = gb = None
        if x.requires_grad:
            gcols = np.einsum("bol,ock->bclk", g, wd, optimize=True)
            gxp = np.zeros((B, C, Lp), dtype=g.dtype)
            for k in range(K):
                gxp[:, :, k:k + stride * (L_out - 1) + 1:stride] += gcols[..., k]
            gx = gxp[:, :, padding:padding + L]
        if w.requires_grad:
            gw = np.einsum("bol,bclk->ock", g, cols, optimize=True)
        if b is not None and b.requires_grad:
            gb = g.sum(axis=(0, 2))
        return (gx, gw, gb) if b is not None else (gx, gw)

    return _make("conv1d", out, parents, grad_fn)


def embedding(table, idx) -> DiffTensor:
    """Row lookup ``table[idx]`` with integer indices."""
    table = _as_tensor(table)
    idx = np.asarray(idx)
    if idx.dtype.kind not in "iu":
        raise TypeError("embedding: indices must be integers")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeError(f"embedding: index out of range for table of {table.shape[0]} rows")
    return take(table, idx)


def topk(a, k: int, axis: int = -1) -> tuple[np.ndarray, np.ndarray]:
    """Largest ``k`` values along ``axis`` (non-differentiable).

    Ties are broken by lowest index. Returns ``(values, indices)`` sorted by
    descending value.
    """
    data = a.data if isinstance(a, DiffTensor) else np.asarray(a)
    n = data.shape[axis]
    if not 0 <= k <= n:
        raise ValueError(f"topk: k={k} out of range for axis length {n}")
    order = np.argsort(-data, axis=axis, kind="stable")
    idx = np.take(order, np.arange(k), axis=axis)
    return np.take_along_axis(data, idx, axis=axis), idx


# ---------------------------------------------------------------------------
# Fourier transforms (complex values carried as a trailing [real, imag] axis)
# ---------------------------------------------------------------------------

def rfft(a, axis: int = -1) -> DiffTensor:
    """Real FFT along ``axis``; output has that axis of length n//2+1 and a trailing axis of 2."""
    a = _as_tensor(a)
    axis = axis % a.ndim
    n = a.shape[axis]
    if n < 1:
        raise ShapeError("rfft: transform length must be >= 1")
    _check_nan("rfft", a)
    spec = np.fft.rfft(a.data, axis=axis)
    out = np.stack([spec.real, spec.imag], axis=-1).astype(a.dtype, copy=False)

    def grad_fn(g):
        G = g[..., 0] + 1j * g[..., 1]
        pad = [(0, 0)] * G.ndim
        pad[axis] = (0, n - G.shape[axis])
        full = np.pad(G, pad)
        return ((n * np.fft.ifft(full, axis=axis).real).astype(a.dtype, copy=False),)

    return _make("rfft", out, (a,), grad_fn)


def irfft(a, n: int, axis: int = -2) -> DiffTensor:
    """Inverse of :func:`rfft`; ``axis`` indexes the frequency axis of ``a`` (..., F, ..., 2)."""
    a = _as_tensor(a)
    if a.shape[-1] != 2:
        raise ShapeError(f"irfft: expected trailing [real, imag] axis, got shape {a.shape}")
    axis = axis % a.ndim
    if axis == a.ndim - 1:
        raise ShapeError("irfft: frequency axis cannot be the [real, imag] axis")
    if n < 1 or a.shape[axis] != n // 2 + 1:
        raise ShapeError(f"irfft: {a.shape[axis]} bins inconsistent with length {n}")
    _check_nan("irfft", a)
    Z = a.data[..., 0] + 1j * a.data[..., 1]
    out = np.fft.irfft(Z, n=n, axis=axis).astype(a.dtype, copy=False)

    scale_shape = [1] * Z.ndim
    scale_shape[axis] = n // 2 + 1
    c = np.full(n // 2 + 1, 2.0 / n)
    c[0] = 1.0 / n
    if n % 2 == 0:
        c[-1] = 1.0 / n
    c = c.reshape(scale_shape)
    imag_mask = np.ones(n // 2 + 1)
    imag_mask[0] = 0.0
    if n % 2 == 0:
        imag_mask[-1] = 0.0
    imag_mask = imag_mask.reshape(scale_shape)

    def grad_fn(g):
        R = np.fft.rfft(g, axis=axis)
        return (np.stack([R.real * c, R.imag * c * imag_mask], axis=-1).astype(a.dtype, copy=False),)

    return _make("irfft", out, (a,), grad_fn)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def grad_check(f: Callable[[DiffTensor], DiffTensor], x, eps: float = 1e-6) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |analytic|)."""
    if eps <= 0:
        raise ValueError("grad_check: eps must be positive")
    base = np.array(x.data if isinstance(x, DiffTensor) else x, dtype=np.float64)
    leaf = DiffTensor(base.copy(), requires_grad=True)
    out = f(leaf)
    if out.size != 1:
        raise ShapeError(f"grad_check: f must be scalar-valued, got shape {out.shape}")
    if out.requires_grad:
        backward(out)
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(base)
    else:
        analytic = np.zeros_like(base)

    numeric = np.empty_like(base)
    flat = base.reshape(-1)
    num_flat = numeric.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(f(DiffTensor(base.copy())).data)
            flat[i] = orig - eps
            fm = float(f(DiffTensor(base.copy())).data)
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise FloatingPointError(f"grad_check: f not finite at coordinate {i} +/- eps")
            num_flat[i] = (fp - fm) / (2 * eps)
    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))
    return float(err.max()) if err.size else 0.0
