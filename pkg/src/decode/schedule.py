"""Cosine noise schedule, forward process and DDPM posterior."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import DiffTensor

BETA_MAX = 0.999


def _cosine_f(t: np.ndarray, T_diff: int, s: float) -> np.ndarray:
    return np.cos(((t / T_diff) + s) / (1 + s) * math.pi / 2) ** 2


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step arrays indexed 0..T_diff; index 0 is the clean state (alpha_bar = 1).

    ``model_t[i]`` is the training-time step the denoiser is queried with at
    step ``i``; it differs from ``i`` only for respaced schedules.
    """

    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    posterior_mean_coef1: np.ndarray
    posterior_mean_coef2: np.ndarray
    posterior_var: np.ndarray
    model_t: np.ndarray
    clipped: np.ndarray  # steps where beta hit BETA_MAX

    @property
    def T_diff(self) -> int:
        return len(self.beta) - 1

    @classmethod
    def from_alpha_bar(cls, alpha_bar: np.ndarray, model_t: np.ndarray | None = None) -> "NoiseSchedule":
        """Build from ``alpha_bar[1..T]`` (``alpha_bar[0]`` must be 1)."""
        alpha_bar = np.asarray(alpha_bar, dtype=np.float64)
        raw_beta = 1.0 - alpha_bar[1:] / alpha_bar[:-1]
        beta_tail = np.clip(raw_beta, 1e-12, BETA_MAX)
        clipped = np.concatenate([[False], raw_beta >= BETA_MAX])
        beta = np.concatenate([[0.0], beta_tail])
        alpha = 1.0 - beta
        ab = np.cumprod(alpha)
        ab_prev = np.concatenate([[1.0], ab[:-1]])
        with np.errstate(divide="ignore", invalid="ignore"):
            denom = 1.0 - ab
            coef1 = np.where(denom > 0, beta * np.sqrt(ab_prev) / denom, 1.0)
            coef2 = np.where(denom > 0, (1.0 - ab_prev) * np.sqrt(alpha) / denom, 0.0)
            var = np.where(denom > 0, beta * (1.0 - ab_prev) / denom, 0.0)
        if model_t is None:
            model_t = np.arange(len(ab))
        return cls(beta, alpha, ab, coef1, coef2, var, np.asarray(model_t), clipped)

    def respaced(self, n_steps: int) -> "NoiseSchedule":
        """Uniform-stride sub-selection of ``n_steps`` steps over [1, T_diff]."""
        if not 1 <= n_steps <= self.T_diff:
            raise ValueError(f"respaced: n_steps must be in [1, {self.T_diff}], got {n_steps}")
        if n_steps == self.T_diff:
            return self
        keep = np.unique(np.round(np.linspace(1, self.T_diff, n_steps)).astype(int))
        ab = np.concatenate([[1.0], self.alpha_bar[keep]])
        return NoiseSchedule.from_alpha_bar(ab, model_t=np.concatenate([[0], self.model_t[keep]]))

    def check_step(self, t: int) -> None:
        if not 1 <= t <= self.T_diff:
            raise ValueError(f"step {t} out of range [1, {self.T_diff}]")


def make_cosine_schedule(T_diff: int, s: float = 0.008) -> NoiseSchedule:
    if T_diff < 1:
        raise ValueError("make_cosine_schedule: T_diff must be >= 1")
    if not 0 < s < 1:
        raise ValueError("make_cosine_schedule: s must be in (0, 1)")
    steps = np.arange(T_diff + 1, dtype=np.float64)
    f = _cosine_f(steps, T_diff, s)
    return NoiseSchedule.from_alpha_bar(f / f[0])


def _coef(arr: np.ndarray, t, like: np.ndarray) -> np.ndarray:
    """Gather per-item coefficients, broadcastable against a (B, T, d) batch."""
    c = arr[np.asarray(t)]
    if np.ndim(c) == 0:
        return np.asarray(c, dtype=like.dtype)
    return c.reshape((-1,) + (1,) * (like.ndim - 1)).astype(like.dtype)


def q_sample(x0, t, noise, schedule: NoiseSchedule):
    """sqrt(alpha_bar_t) * x0 + sqrt(1 - alpha_bar_t) * noise.

    ``t`` is a step index or a per-item array for a leading batch axis.
    Works on ndarrays or DiffTensors (``noise`` may be either).
    """
    t_arr = np.asarray(t)
    if t_arr.min() < 0 or t_arr.max() > schedule.T_diff:
        raise ValueError(f"q_sample: step {t} out of range [0, {schedule.T_diff}]")
    x0_data = x0.data if isinstance(x0, DiffTensor) else np.asarray(x0)
    noise_data = noise.data if isinstance(noise, DiffTensor) else np.asarray(noise)
    if x0_data.shape != noise_data.shape:
        raise ValueError(f"q_sample: noise shape {noise_data.shape} != x0 shape {x0_data.shape}")
    a = np.sqrt(_coef(schedule.alpha_bar, t, x0_data))
    b = np.sqrt(1.0 - _coef(schedule.alpha_bar, t, x0_data))
    return a * x0 + b * noise


def posterior_step(x_t, x0_hat, t, z, schedule: NoiseSchedule):
    """coef1[t] * x0_hat + coef2[t] * x_t + sqrt(posterior_var[t]) * z."""
    t_arr = np.asarray(t)
    if t_arr.min() < 1 or t_arr.max() > schedule.T_diff:
        raise ValueError(f"posterior_step: step {t} out of range [1, {schedule.T_diff}]")
    xd = x_t.data if isinstance(x_t, DiffTensor) else np.asarray(x_t)
    zd = z.data if isinstance(z, DiffTensor) else np.asarray(z)
    xh = x0_hat.data if isinstance(x0_hat, DiffTensor) else np.asarray(x0_hat)
    if not (xd.shape == zd.shape == xh.shape):
        raise ValueError(f"posterior_step: shapes {xd.shape}, {xh.shape}, {zd.shape} differ")
    final = t_arr == 1
    if np.any(final):
        zf = zd[final] if t_arr.ndim else zd
        if np.any(zf != 0):
            raise ValueError("posterior_step: final step (t=1) must be noiseless (z = 0)")
    c1 = _coef(schedule.posterior_mean_coef1, t, xd)
    c2 = _coef(schedule.posterior_mean_coef2, t, xd)
    sd = np.sqrt(_coef(schedule.posterior_var, t, xd))
    return c1 * x0_hat + c2 * x_t + sd * z


def posterior_mean(x_t, x0_hat, t, schedule: NoiseSchedule):
    xd = x_t.data if isinstance(x_t, DiffTensor) else np.asarray(x_t)
    return (_coef(schedule.posterior_mean_coef1, t, xd) * x0_hat
            + _coef(schedule.posterior_mean_coef2, t, xd) * x_t)
