"""Joint diffusion + contrastive training with Adam, EMA weights and checkpoints.

Loss per batch::

    w_diffusion * mean|x0_hat - x0| + w_contrast * InfoNCE(f_ts(x0[-h:]), E_text, labels)

The contrastive term embeds the horizon crop of the clean window, the same
span the text guidance classifies at sampling time.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import tensor as T
from .bridge import EmbeddingTable, SemanticBridge, SignalEncoder, encode_signal, info_nce, project_text
from .denoiser import DenoiserConfig, DenoiserModel, denoise
from .io import load_checkpoint_file, save_checkpoint_file
from .prep import TrialSet
from .schedule import NoiseSchedule, make_cosine_schedule, q_sample
from .tensor import DiffTensor

log = logging.getLogger(__name__)

FORMAT_NAME = "decode-checkpoint"


@dataclass
class TrainConfig:
    epochs: int = 12000
    batch_size: int = 32
    lr: float = 1e-5
    ema_decay: float = 0.995
    w_diffusion: float = 1.0
    w_contrast: float = 0.1
    T_win: int = 1075
    stride: int = 64
    horizon: int = 75
    seed: int = 0
    checkpoint_every: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("learning rate must be > 0")
        if not 0 < self.ema_decay < 1:
            raise ValueError("EMA decay must be in (0, 1)")
        if self.stride < 1:
            raise ValueError("stride must be >= 1")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")
        if not 1 <= self.horizon < self.T_win:
            raise ValueError(f"horizon must be in [1, T_win), got {self.horizon}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class BridgeConfig:
    d_emb: int = 64
    tau: float = 0.07
    widths: tuple[int, ...] = (32, 64)
    kernel: int = 5
    stride: int = 2

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------

@dataclass
class WindowSet:
    x: np.ndarray  # (M, T_win, d)
    labels: list[str]
    trial: np.ndarray  # source trial per window
    start: np.ndarray  # start sample within the trial

    def __len__(self) -> int:
        return len(self.labels)


def window_starts(length: int, T_win: int, stride: int, marker: int) -> list[int]:
    if T_win > length:
        raise ValueError(f"window length {T_win} exceeds trial length {length}")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    return [s for s in range(0, length - T_win + 1, stride) if s <= marker < s + T_win]


def sliding_windows(trials: TrialSet, T_win: int, stride: int) -> WindowSet:
    """Per-trial windows at 0, stride, 2*stride, ... that contain the trial's marker."""
    xs, labels, tr, st = [], [], [], []
    for i in range(trials.n_trials):
        for s in window_starts(trials.n_samples, T_win, stride, int(trials.marker_index[i])):
            xs.append(trials.trials[i, s:s + T_win])
            labels.append(trials.labels[i])
            tr.append(i)
            st.append(s)
    x = np.stack(xs) if xs else np.zeros((0, T_win, trials.n_channels))
    return WindowSet(x, labels, np.asarray(tr, dtype=np.int64), np.asarray(st, dtype=np.int64))


@dataclass
class Normalizer:
    """Per-channel z-score with training-set statistics."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, x: np.ndarray) -> "Normalizer":
        flat = np.asarray(x, dtype=np.float64).reshape(-1, x.shape[-1])
        std = flat.std(axis=0)
        return cls(flat.mean(axis=0), np.where(std > 0, std, 1.0))

    def normalize(self, x):
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.std

    def denormalize(self, z):
        return np.asarray(z, dtype=np.float64) * self.std + self.mean


# ---------------------------------------------------------------------------
# optimisation
# ---------------------------------------------------------------------------

class Adam:
    def __init__(self, params: dict, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr, self.b1, self.b2, self.eps = lr, betas[0], betas[1], eps
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            step = self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            p.data = (p.data - step).astype(p.dtype)


class EMA:
    def __init__(self, params: dict, decay: float):
        self.decay = decay
        self.shadow = {k: p.data.copy() for k, p in params.items()}

    def update(self, params: dict) -> None:
        d = self.decay
        for k, p in params.items():
            self.shadow[k] = (d * self.shadow[k] + (1 - d) * p.data).astype(p.dtype)


# ---------------------------------------------------------------------------
# state
# ---------------------------------------------------------------------------

@dataclass
class TrainState:
    model: DenoiserModel
    bridge: SemanticBridge
    schedule_cfg: dict
    train_cfg: TrainConfig
    bridge_cfg: BridgeConfig
    norm: Normalizer
    opt: Adam
    ema: EMA
    epoch: int = 0
    step: int = 0
    log: list[dict] = field(default_factory=list)

    @property
    def schedule(self) -> NoiseSchedule:
        return make_cosine_schedule(self.schedule_cfg["T_diff"], self.schedule_cfg["s"])

    def ema_modules(self) -> tuple[DenoiserModel, SemanticBridge]:
        """Fresh model/bridge carrying the EMA weights (for sampling)."""
        model, bridge = build_modules(self.model.cfg, self.bridge.table.labels, self.bridge.table.raw,
                                      self.bridge_cfg, seed=0, dtype=self.model.dtype)
        model.load_state_dict({k[len("model."):]: v for k, v in self.ema.shadow.items() if k.startswith("model.")})
        bridge.load_state_dict({k[len("bridge."):]: v for k, v in self.ema.shadow.items()
                                if k.startswith("bridge.")})
        return model, bridge


def named_trainables(model: DenoiserModel, bridge: SemanticBridge) -> dict:
    out = {f"model.{k}": p for k, p in model.named_parameters()}
    out.update({f"bridge.{k}": p for k, p in bridge.named_parameters()})
    return out


def build_modules(model_cfg: DenoiserConfig, labels, raw, bridge_cfg: BridgeConfig, seed: int,
                  dtype="float32") -> tuple[DenoiserModel, SemanticBridge]:
    model = DenoiserModel(model_cfg, np.random.default_rng([seed, 1]))
    rng = np.random.default_rng([seed, 2])
    table = EmbeddingTable(labels, raw, d_emb=bridge_cfg.d_emb, rng=rng, tau=bridge_cfg.tau)
    enc = SignalEncoder(model_cfg.d, d_emb=bridge_cfg.d_emb, widths=tuple(bridge_cfg.widths),
                        kernel=bridge_cfg.kernel, stride=bridge_cfg.stride, rng=rng)
    bridge = SemanticBridge(table, enc)
    model.astype(dtype)
    bridge.astype(dtype)
    return model, bridge


def init_state(model_cfg: DenoiserConfig, table_labels, table_raw, train_cfg: TrainConfig,
               norm: Normalizer, T_diff: int = 500, s: float = 0.008,
               bridge_cfg: BridgeConfig | None = None) -> TrainState:
    bridge_cfg = bridge_cfg or BridgeConfig()
    model, bridge = build_modules(model_cfg, table_labels, table_raw, bridge_cfg, train_cfg.seed, train_cfg.dtype)
    params = named_trainables(model, bridge)
    return TrainState(model, bridge, {"T_diff": T_diff, "s": s}, train_cfg, bridge_cfg, norm,
                      Adam(params, train_cfg.lr), EMA(params, train_cfg.ema_decay))


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def train_step(x0: np.ndarray, labels: np.ndarray, state: TrainState, schedule: NoiseSchedule,
               rng: np.random.Generator, batch_ids=None) -> dict:
    """One optimisation step on a normalized batch ``x0`` (B, T_win, d)."""
    if len(x0) == 0:
        raise ValueError("train_step: empty batch")
    cfg = state.train_cfg
    model, bridge = state.model, state.bridge
    dtype = model.dtype
    B = len(x0)
    t = rng.integers(1, schedule.T_diff + 1, size=B)
    noise = rng.standard_normal(x0.shape)
    x0 = x0.astype(dtype)
    x_t = q_sample(x0, t, noise.astype(dtype), schedule)

    params = state.opt.params
    for p in params.values():
        p.grad = None
    x0_hat, _ = denoise(x_t, t, model)
    l1 = T.mean(T.abs(x0_hat - DiffTensor(x0)))
    loss = cfg.w_diffusion * l1
    contrast_val = 0.0
    if cfg.w_contrast > 0 and bridge.table.K > 1:
        e = encode_signal(x0[:, -cfg.horizon:], bridge.encoder)
        nce = info_nce(e, project_text(bridge.table), labels, bridge.table.tau)
        loss = loss + cfg.w_contrast * nce
        contrast_val = float(nce.data)
    lv = float(loss.data)
    if not math.isfinite(lv):
        ids = None if batch_ids is None else np.asarray(batch_ids).tolist()
        raise FloatingPointError(f"non-finite loss {lv} at step {state.step + 1}; t={t.tolist()} batch={ids}")
    T.backward(loss)
    state.opt.step()
    state.ema.update(params)
    state.step += 1
    return {"loss": lv, "l1": float(l1.data), "contrast": contrast_val}


def label_indices(labels, table: EmbeddingTable) -> np.ndarray:
    return np.array([table.index(lab) for lab in labels], dtype=np.int64)


def train(windows: np.ndarray, labels, state: TrainState, epochs: int | None = None,
          checkpoint_path=None, max_seconds: float | None = None, on_epoch=None) -> TrainState:
    """Run epochs ``state.epoch .. epochs-1`` on normalized windows.

    Epoch e shuffles with, and draws all noise from, the stream (seed, e), so
    a resumed run replays the uninterrupted one exactly.
    """
    cfg = state.train_cfg
    total = cfg.epochs if epochs is None else epochs
    schedule = state.schedule
    y = label_indices(labels, state.bridge.table)
    n = len(windows)
    if n == 0:
        raise ValueError("no training windows")
    t0 = time.perf_counter()
    while state.epoch < total:
        rng = np.random.default_rng([cfg.seed, 1000 + state.epoch])
        order = rng.permutation(n)
        for b in range(0, n, cfg.batch_size):
            idx = order[b:b + cfg.batch_size]
            out = train_step(windows[idx], y[idx], state, schedule, rng, batch_ids=idx)
            state.log.append({"epoch": state.epoch, "step": state.step, **out})
        state.epoch += 1
        if on_epoch is not None:
            on_epoch(state)
        if checkpoint_path and cfg.checkpoint_every and state.epoch % cfg.checkpoint_every == 0:
            save_checkpoint(state, checkpoint_path)
        if max_seconds is not None and time.perf_counter() - t0 > max_seconds:
            log.warning("stopping after %d epochs: time budget %.0fs reached", state.epoch, max_seconds)
            break
    return state


def write_loss_log(state: TrainState, path) -> None:
    lines = ["epoch,step,loss,l1,contrast"]
    lines += [f"{r['epoch']},{r['step']},{r['loss']!r},{r['l1']!r},{r['contrast']!r}" for r in state.log]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def state_tensors(state: TrainState) -> tuple[dict, dict]:
    params = named_trainables(state.model, state.bridge)
    tensors = {f"param/{k}": p.data for k, p in params.items()}
    tensors.update({f"ema/{k}": v for k, v in state.ema.shadow.items()})
    tensors.update({f"adam_m/{k}": v for k, v in state.opt.m.items()})
    tensors.update({f"adam_v/{k}": v for k, v in state.opt.v.items()})
    tensors["bridge_raw"] = state.bridge.table.raw
    tensors["norm_mean"] = state.norm.mean
    tensors["norm_std"] = state.norm.std
    meta = {
        "format": FORMAT_NAME,
        "model_cfg": state.model.cfg.to_dict(),
        "bridge_cfg": state.bridge_cfg.to_dict(),
        "labels": list(state.bridge.table.labels),
        "schedule": dict(state.schedule_cfg),
        "train_cfg": state.train_cfg.to_dict(),
        "epoch": state.epoch,
        "step": state.step,
        "adam_t": state.opt.t,
        "rng": {"seed": state.train_cfg.seed, "next_epoch_stream": [state.train_cfg.seed, 1000 + state.epoch]},
        "log": state.log,
    }
    return tensors, meta


def save_checkpoint(state: TrainState, path) -> None:
    tensors, meta = state_tensors(state)
    save_checkpoint_file(path, tensors, meta)


def load_checkpoint(path) -> TrainState:
    tensors, meta = load_checkpoint_file(path)
    if meta.get("format") != FORMAT_NAME:
        raise ValueError(f"{path}: not a {FORMAT_NAME} file")
    model_cfg = DenoiserConfig(**meta["model_cfg"])
    bcfg = meta["bridge_cfg"]
    bridge_cfg = BridgeConfig(**{**bcfg, "widths": tuple(bcfg["widths"])})
    tcfg = TrainConfig(**{f.name: meta["train_cfg"][f.name] for f in fields(TrainConfig)})
    norm = Normalizer(tensors["norm_mean"], tensors["norm_std"])
    state = init_state(model_cfg, meta["labels"], tensors["bridge_raw"], tcfg, norm,
                       meta["schedule"]["T_diff"], meta["schedule"]["s"], bridge_cfg)
    params = named_trainables(state.model, state.bridge)
    for k, p in params.items():
        p.data = _exact(tensors[f"param/{k}"], p)
        state.opt.m[k] = _exact(tensors[f"adam_m/{k}"], p)
        state.opt.v[k] = _exact(tensors[f"adam_v/{k}"], p)
        state.ema.shadow[k] = _exact(tensors[f"ema/{k}"], p)
    state.opt.t = meta["adam_t"]
    state.epoch, state.step = meta["epoch"], meta["step"]
    state.log = meta["log"]
    return state


def _exact(arr: np.ndarray, like) -> np.ndarray:
    if arr.shape != like.shape or arr.dtype != like.dtype:
        raise ValueError(f"checkpoint tensor {arr.shape}/{arr.dtype} does not match {like.shape}/{like.dtype}")
    return arr.copy()
