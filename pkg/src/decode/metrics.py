"""Forecast scores: median-point MAE, ensemble CRPS, horizon curves, ablations."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats


@dataclass
class ForecastResult:
    ensemble: np.ndarray  # (S, h, d)
    truth: np.ndarray  # (h, d)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.ensemble = np.asarray(self.ensemble, dtype=np.float64)
        self.truth = np.asarray(self.truth, dtype=np.float64)
        if self.ensemble.ndim != 3 or self.ensemble.shape[0] < 1:
            raise ValueError(f"ensemble must be (S>=1, h, d), got {self.ensemble.shape}")
        if self.ensemble.shape[1:] != self.truth.shape:
            raise ValueError(f"ensemble {self.ensemble.shape[1:]} and truth {self.truth.shape} shapes differ")
        if not (np.all(np.isfinite(self.ensemble)) and np.all(np.isfinite(self.truth))):
            raise ValueError("forecast result contains non-finite values")

    @property
    def point(self) -> np.ndarray:
        return np.median(self.ensemble, axis=0)


def abs_error(result: ForecastResult) -> np.ndarray:
    """|median - truth|, (h, d)."""
    return np.abs(result.point - result.truth)


def mae(result: ForecastResult, per_channel: bool = False):
    err = abs_error(result)
    return err.mean(axis=0) if per_channel else float(err.mean())


def crps_terms(result: ForecastResult) -> np.ndarray:
    """Per-coordinate CRPS: mean_i |X_i - y| - sum_ij |X_i - X_j| / (2 S^2), shape (h, d)."""
    X, y = result.ensemble, result.truth
    S = X.shape[0]
    if S == 1:
        warnings.warn("crps: single-member ensemble, CRPS reduces to absolute error", stacklevel=3)
        return np.abs(X[0] - y)
    skill = np.abs(X - y).mean(axis=0)
    # sum_ij |X_i - X_j| = 2 * sum_i (2i - S + 1) X_(i) over sorted members
    # weights sum to zero, so centring on the minimum is exact in theory and
    # makes a collapsed ensemble's spread exactly 0 in floating point
    Xs = np.sort(X, axis=0)
    Xs = Xs - Xs[:1]
    w = (2 * np.arange(S) - S + 1).reshape(-1, 1, 1)
    spread = 2.0 * (w * Xs).sum(axis=0)
    return np.maximum(skill - spread / (2.0 * S * S), 0.0)


def crps(result: ForecastResult, per_step: bool = False):
    terms = crps_terms(result)
    return terms.mean(axis=1) if per_step else float(terms.mean())


def gaussian_crps(mu: float, sigma: float, y: float) -> float:
    """Closed form for a normal predictive distribution."""
    z = (y - mu) / sigma
    return float(sigma * (z * (2 * stats.norm.cdf(z) - 1) + 2 * stats.norm.pdf(z) - 1 / np.sqrt(np.pi)))


def _check_common_horizon(results) -> int:
    hs = {r.truth.shape[0] for r in results}
    if len(hs) != 1:
        raise ValueError(f"horizon_curve: mixed horizons {sorted(hs)}")
    return hs.pop()


def horizon_curve(results: list[ForecastResult]) -> tuple[np.ndarray, np.ndarray, int]:
    """(lead 1..h, MAE per lead averaged over tasks and channels, number of tasks)."""
    if not results:
        raise ValueError("horizon_curve: no results")
    h = _check_common_horizon(results)
    err = np.stack([abs_error(r).mean(axis=1) for r in results])  # (n, h)
    return np.arange(1, h + 1), err.mean(axis=0), len(results)


def curve_trend(curve: np.ndarray) -> float:
    """Spearman rank correlation between lead time and MAE."""
    leads = np.arange(1, len(curve) + 1)
    return float(stats.spearmanr(leads, curve).statistic)


def write_horizon_csv(results: list[ForecastResult], path) -> None:
    lead, curve, n = horizon_curve(results)
    lines = ["lead,mae_uv,n"] + [f"{l},{v!r},{n}" for l, v in zip(lead, curve)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


@dataclass
class AblationRow:
    variant: str
    mae: float
    crps: float
    mean_diff: float  # mean paired per-task MAE difference vs. reference
    n_better: int
    n_worse: int
    p_sign: float

    @property
    def relative_improvement(self) -> float:
        ref = self.mae - self.mean_diff
        return -self.mean_diff / ref if ref else 0.0


def sign_test(diffs) -> tuple[int, int, float]:
    """Two-sided sign test on paired differences (negative = variant better); ties dropped."""
    diffs = np.asarray(diffs)
    better, worse = int(np.sum(diffs < 0)), int(np.sum(diffs > 0))
    n = better + worse
    p = 1.0 if n == 0 else float(stats.binomtest(better, n, 0.5).pvalue)
    return better, worse, p


def ablation_report(variants: dict[str, list[ForecastResult]], reference: str | None = None) -> list[AblationRow]:
    """Per-variant MAE/CRPS with paired per-task differences against ``reference``."""
    if not variants:
        raise ValueError("ablation_report: no variants")
    names = list(variants)
    reference = names[0] if reference is None else reference
    ref = variants[reference]
    for name, res in variants.items():
        if len(res) != len(ref) or any(a.truth.shape != b.truth.shape or not np.array_equal(a.truth, b.truth)
                                       for a, b in zip(res, ref)):
            raise ValueError(f"ablation_report: variant {name!r} was not scored on the same tasks as {reference!r}")
    ref_mae = np.array([mae(r) for r in ref])
    rows = []
    for name in names:
        per_task = np.array([mae(r) for r in variants[name]])
        diffs = per_task - ref_mae
        better, worse, p = sign_test(diffs)
        rows.append(AblationRow(name, float(per_task.mean()), float(np.mean([crps(r) for r in variants[name]])),
                                float(diffs.mean()), better, worse, p))
    return rows


def write_ablation_csv(rows: list[AblationRow], path) -> None:
    lines = ["variant,mae,crps,mean_diff,n_better,n_worse,p_sign"]
    lines += [f"{r.variant},{r.mae!r},{r.crps!r},{r.mean_diff!r},{r.n_better},{r.n_worse},{r.p_sign!r}"
              for r in rows]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
