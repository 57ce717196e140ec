"""Guided reverse diffusion: replacement inpainting + history Langevin + text guidance.

Every window is ``T_win = n_obs + h`` rows; the first ``n_obs`` rows are the
observed history, the last ``h`` the forecast horizon. Each reverse step

1. overwrites the observed rows with the history re-noised to level t,
2. predicts x0 and the posterior mean, and takes one gradient of
   ``lambda_h * (-alpha_w * ||x_obs - x0_hat_obs||^2) + lambda_t * log p(k | x0_hat_horizon)``,
3. sets ``x_{t-1} = mu + sigma_t z + g`` on the horizon rows,
4. runs K(t) Langevin refinements of the horizon (history term as an
   explicit ascent step, the Gaussian fluency term as its exact proximal map).

``model`` is anything callable as ``model(x_t, t) -> (x0_hat, parts)`` with
``.dtype`` and ``.cfg.d``; normally a :class:`DenoiserModel`.

All randomness for member ``m`` of task ``j`` comes from the stream
``(seed, j, m)``, drawn in a fixed order: the initial state, then per step the
replacement noise, the posterior noise (t > 1) and, when refinement runs, the
replacement noise for level t-1.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .bridge import SemanticBridge, class_log_probs
from .denoiser import DenoiserModel
from .schedule import NoiseSchedule, posterior_mean, posterior_step, q_sample
from .tensor import DiffTensor

TEXT_MODES = ("denoised", "noisy")


@dataclass
class GuidanceConfig:
    eta_h: float = 0.05
    alpha_w: float = 1.0
    gamma_w: float = 0.1
    lambda_h: float = 1.0
    lambda_t: float = 0.3
    K_max: int = 5
    target_event: int = 0
    n_samples: int = 8
    seed: int = 0
    text_mode: str = "denoised"

    def __post_init__(self):
        for name in ("eta_h", "alpha_w", "gamma_w", "lambda_h", "lambda_t"):
            if getattr(self, name) < 0:
                raise ValueError(f"GuidanceConfig.{name} must be >= 0")
        if self.K_max < 0:
            raise ValueError("GuidanceConfig.K_max must be >= 0")
        if self.n_samples < 1:
            raise ValueError("GuidanceConfig.n_samples must be >= 1")
        if self.text_mode not in TEXT_MODES:
            raise ValueError(f"text_mode must be one of {TEXT_MODES}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ForecastTask:
    history: np.ndarray  # (n_obs, d), normalized units
    horizon: int
    event: str | None = None
    channel_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.history = np.asarray(self.history, dtype=np.float64)
        if self.history.ndim != 2:
            raise ValueError(f"history must be (n_obs, d), got {self.history.shape}")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if not np.all(np.isfinite(self.history)):
            raise ValueError("history contains non-finite values")

    @property
    def n_obs(self) -> int:
        return self.history.shape[0]

    @property
    def window(self) -> int:
        return self.n_obs + self.horizon


@dataclass
class ForecastOutput:
    samples: np.ndarray  # (S, h, d)
    trend: np.ndarray  # (S, h, d), from the t=1 prediction
    seasonal: np.ndarray  # (S, h, d), summed seasonal terms at t=1
    windows: np.ndarray  # (S, T_win, d), final states incl. observed rows
    langevin_iters: dict[int, int]


def langevin_iterations(t: int, T_diff: int, K_max: int) -> int:
    """K(t) = ceil(K_max * t / T_diff): most refinement at high noise."""
    return int(math.ceil(K_max * t / T_diff))


# ---------------------------------------------------------------------------
# gradients
# ---------------------------------------------------------------------------

def _reconstruction(x0_hat: DiffTensor, history: np.ndarray, n_obs: int) -> DiffTensor:
    """Sum over items of ||x_obs - x0_hat_obs||^2."""
    diff = x0_hat[..., :n_obs, :] - DiffTensor(history.astype(x0_hat.dtype))
    return T.sum(diff * diff)


def history_gradient(x, t: int, task: ForecastTask, schedule: NoiseSchedule, model: DenoiserModel,
                     cfg: GuidanceConfig, mean=None) -> np.ndarray:
    """Gradient of -alpha_w ||x_obs - x0_hat_obs||^2 + gamma_w log N(x; mean, posterior_var[t]).

    ``x0_hat`` is ``denoise(x, t)``. The sign makes the reconstruction term an
    ascent direction (ascending it lowers the error). The Gaussian term is
    included only when ``mean`` is given and the posterior variance is positive.
    """
    schedule.check_step(t)
    xd = x.data if isinstance(x, DiffTensor) else np.asarray(x, dtype=model.dtype)
    g = np.zeros_like(xd)
    if task.n_obs == 0:
        warnings.warn("history_gradient: empty observed region, returning zero gradient", stacklevel=2)
        return g
    if cfg.alpha_w > 0:
        xt = DiffTensor(xd, requires_grad=True)
        x0_hat, _ = model(xt, schedule.model_t[t])
        T.backward(0.0 - cfg.alpha_w * _reconstruction(x0_hat, task.history, task.n_obs))
        g = g + xt.grad
    var = schedule.posterior_var[t]
    if cfg.gamma_w > 0 and mean is not None and var > 0:
        md = mean.data if isinstance(mean, DiffTensor) else np.asarray(mean)
        g = g - cfg.gamma_w * (xd - md) / var
    return g


def text_gradient(x, k: int, bridge: SemanticBridge, n_obs: int, model: DenoiserModel | None = None,
                  t: int | None = None, schedule: NoiseSchedule | None = None) -> np.ndarray:
    """Gradient of log p(k | horizon) w.r.t. ``x``; exactly zero on the observed rows.

    Without ``model`` the horizon rows of ``x`` itself are classified (noisy
    mode). With ``model`` (and ``t``) they are taken from ``denoise(x, t)``.
    """
    if not 0 <= k < bridge.table.K:
        raise ValueError(f"text_gradient: event index {k} outside [0, {bridge.table.K})")
    xd = x.data if isinstance(x, DiffTensor) else np.asarray(x)
    xt = DiffTensor(xd, requires_grad=True)
    if model is not None:
        step = schedule.model_t[t] if schedule is not None else t
        src, _ = model(xt, step)
    else:
        src = xt
    lp = class_log_probs(src[..., n_obs:, :], bridge.table, bridge.encoder)
    T.backward(T.sum(lp[..., k]))
    g = np.zeros_like(xd) if xt.grad is None else xt.grad.copy()
    g[..., :n_obs, :] = 0
    return g


# ---------------------------------------------------------------------------
# refinement
# ---------------------------------------------------------------------------

def _check_finite(x: np.ndarray, t: int, what: str) -> None:
    if not np.all(np.isfinite(x)):
        raise FloatingPointError(f"non-finite sampler state at step t={t} ({what})")


def langevin_refine(x_prev: np.ndarray, t: int, history: np.ndarray, n_obs: int, mean: np.ndarray,
                    schedule: NoiseSchedule, model: DenoiserModel, cfg: GuidanceConfig) -> tuple[np.ndarray, int]:
    """K(t) refinement iterations on the horizon rows of ``x_prev`` (state at level t-1).

    Each iteration ascends -alpha_w ||x_obs - x0_hat_obs||^2 with step eta_h,
    x0_hat = denoise(x', t-1), then applies the proximal map of the fluency
    term gamma_w log N(x'; mean, posterior_var[t]) with the same step size,
    which is the implicit (unconditionally stable) form of its gradient step.
    Returns the refined state and the number of iterations run.
    """
    K = langevin_iterations(t, schedule.T_diff, cfg.K_max)
    if K == 0 or cfg.eta_h == 0:
        return x_prev, 0
    x = x_prev.copy()
    level = max(t - 1, 1)
    var = schedule.posterior_var[t]
    c = cfg.eta_h * cfg.gamma_w / var if var > 0 else 0.0
    for _ in range(K):
        if cfg.alpha_w > 0 and n_obs > 0:
            xt = DiffTensor(x, requires_grad=True)
            x0_hat, _ = model(xt, schedule.model_t[level])
            T.backward(0.0 - cfg.alpha_w * _reconstruction(x0_hat, history, n_obs))
            x[..., n_obs:, :] += cfg.eta_h * xt.grad[..., n_obs:, :]
        if c > 0:
            x[..., n_obs:, :] = (x[..., n_obs:, :] + c * mean[..., n_obs:, :]) / (1.0 + c)
        _check_finite(x, t, "langevin refinement")
    return x, K


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------

def _streams(seed: int, task_ids, n_samples: int) -> list[np.random.Generator]:
    return [np.random.default_rng([seed, j, m]) for j in task_ids for m in range(n_samples)]


def _draw(rngs, shape, dtype) -> np.ndarray:
    return np.stack([r.standard_normal(shape) for r in rngs]).astype(dtype)


def sample_batch(tasks: list[ForecastTask], model: DenoiserModel, schedule: NoiseSchedule,
                 bridge: SemanticBridge | None, cfg: GuidanceConfig, targets=None,
                 task_ids=None) -> list[ForecastOutput]:
    """Sample ``cfg.n_samples`` members for each task in one batched loop.

    Tasks must share n_obs and horizon. ``targets`` gives per-task event
    indices (default ``cfg.target_event``); ``task_ids`` the stream indices
    (default 0..len(tasks)-1), so a task gets identical samples whether it is
    run alone or in a batch.
    """
    if not tasks:
        return []
    n_obs, h = tasks[0].n_obs, tasks[0].horizon
    if any(tk.n_obs != n_obs or tk.horizon != h for tk in tasks):
        raise ValueError("sample_batch: tasks must share history length and horizon")
    d = tasks[0].history.shape[1]
    if d != model.cfg.d:
        raise ValueError(f"history has {d} channels, model expects {model.cfg.d}")
    use_text = cfg.lambda_t > 0 and bridge is not None
    if cfg.lambda_t > 0 and bridge is None:
        raise ValueError("text guidance requested (lambda_t > 0) without a bridge")
    S = cfg.n_samples
    task_ids = list(range(len(tasks))) if task_ids is None else list(task_ids)
    targets = [cfg.target_event] * len(tasks) if targets is None else list(targets)
    if use_text:
        for k in targets:
            if not 0 <= k < bridge.table.K:
                raise ValueError(f"event index {k} outside [0, {bridge.table.K})")
    dtype = model.dtype
    T_win = n_obs + h
    hist = np.repeat(np.stack([tk.history for tk in tasks]).astype(dtype), S, axis=0)  # (B, n_obs, d)
    tgt = np.repeat(np.asarray(targets, dtype=np.int64), S)
    B = hist.shape[0]
    rngs = _streams(cfg.seed, task_ids, S)
    need_grad = cfg.lambda_h * cfg.alpha_w > 0 or use_text

    x = _draw(rngs, (T_win, d), dtype)
    iters: dict[int, int] = {}
    parts_final = None
    for t in range(schedule.T_diff, 0, -1):
        x[:, :n_obs] = q_sample(hist, t, _draw(rngs, (n_obs, d), dtype), schedule)
        xt = DiffTensor(x, requires_grad=need_grad)
        if need_grad:
            x0_hat, parts = model(xt, schedule.model_t[t])
        else:
            with T.no_grad():
                x0_hat, parts = model(xt, schedule.model_t[t])
        z = _draw(rngs, (T_win, d), dtype) if t > 1 else np.zeros_like(x)
        x_new = posterior_step(x, x0_hat.data, t, z, schedule)
        if t == 1:
            parts_final = parts
        if need_grad:
            obj = None
            if cfg.lambda_h * cfg.alpha_w > 0:
                obj = (0.0 - cfg.lambda_h * cfg.alpha_w) * _reconstruction(x0_hat, hist, n_obs)
            if use_text:
                src = x0_hat if cfg.text_mode == "denoised" else xt
                lp = class_log_probs(src[:, n_obs:, :], bridge.table, bridge.encoder)
                term = cfg.lambda_t * T.sum(lp[np.arange(B), tgt])
                obj = term if obj is None else obj + term
            T.backward(obj)
            x_new[:, n_obs:] += xt.grad[:, n_obs:]
        _check_finite(x_new, t, "reverse step")

        if t > 1 and langevin_iterations(t, schedule.T_diff, cfg.K_max) > 0 and cfg.eta_h > 0:
            x_new[:, :n_obs] = q_sample(hist, t - 1, _draw(rngs, (n_obs, d), dtype), schedule)
            mean = posterior_mean(x, x0_hat.data, t, schedule)
            x_new, k = langevin_refine(x_new, t, hist, n_obs, mean, schedule, model, cfg)
            iters[t] = k
        x = x_new
    x[:, :n_obs] = hist

    seasonal = parts_final["seasonal"][0].data
    for s in parts_final["seasonal"][1:]:
        seasonal = seasonal + s.data
    trend = parts_final["trend"].data
    outs = []
    for j in range(len(tasks)):
        sl = slice(j * S, (j + 1) * S)
        outs.append(ForecastOutput(samples=x[sl, n_obs:].copy(), trend=trend[sl, n_obs:].copy(),
                                   seasonal=seasonal[sl, n_obs:].copy(), windows=x[sl].copy(),
                                   langevin_iters=dict(iters)))
    return outs


def sample_forecast(task: ForecastTask, model: DenoiserModel, schedule: NoiseSchedule,
                    bridge: SemanticBridge | None, cfg: GuidanceConfig) -> ForecastOutput:
    """Ensemble of ``cfg.n_samples`` horizon forecasts for one task."""
    target = cfg.target_event
    if task.event is not None and bridge is not None:
        target = bridge.table.index(task.event)
    return sample_batch([task], model, schedule, bridge, cfg, targets=[target])[0]
