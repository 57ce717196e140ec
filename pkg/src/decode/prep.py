"""Trial preprocessing and neural-response statistics.

Pipeline order is fixed: amplitude-threshold rejection, zero-phase FIR
bandpass, baseline correction, average reference. Band power uses the
analytic-signal envelope of a band-limited copy of the (unfiltered) trials.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np
from scipy import signal, stats


@dataclass
class TrialSet:
    trials: np.ndarray  # (N, T, d), microvolts
    labels: list[str]
    marker_index: np.ndarray  # (N,) stimulus sample per trial
    rate_hz: float
    channel_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.trials = np.asarray(self.trials, dtype=np.float64)
        self.marker_index = np.asarray(self.marker_index, dtype=np.int64).reshape(-1)
        self.labels = list(self.labels)
        if self.trials.ndim != 3:
            raise ValueError(f"trials must be (N, T, d), got {self.trials.shape}")
        N, T, d = self.trials.shape
        if not self.channel_names:
            self.channel_names = [f"ch{i}" for i in range(d)]
        if len(self.labels) != N or len(self.marker_index) != N:
            raise ValueError(f"{N} trials but {len(self.labels)} labels / {len(self.marker_index)} markers")
        if len(self.channel_names) != d:
            raise ValueError(f"{d} channels but {len(self.channel_names)} channel names")
        if N and (self.marker_index.min() < 0 or self.marker_index.max() >= T):
            raise ValueError(f"marker index outside [0, {T})")
        if not np.all(np.isfinite(self.trials)):
            raise ValueError("trials contain non-finite values")
        if self.rate_hz <= 0:
            raise ValueError("sampling rate must be positive")

    @property
    def n_trials(self) -> int:
        return self.trials.shape[0]

    @property
    def n_samples(self) -> int:
        return self.trials.shape[1]

    @property
    def n_channels(self) -> int:
        return self.trials.shape[2]

    @property
    def events(self) -> list[str]:
        return sorted(set(self.labels), key=self.labels.index)

    def subset(self, idx) -> "TrialSet":
        idx = np.asarray(idx, dtype=np.int64)
        return TrialSet(self.trials[idx], [self.labels[i] for i in idx], self.marker_index[idx],
                        self.rate_hz, list(self.channel_names))

    def with_trials(self, trials: np.ndarray) -> "TrialSet":
        return replace(self, trials=trials, labels=list(self.labels), marker_index=self.marker_index.copy())


@dataclass(frozen=True)
class BandDef:
    name: str
    lo_hz: float
    hi_hz: float

    def check(self, rate_hz: float) -> None:
        if not 0 < self.lo_hz < self.hi_hz < rate_hz / 2:
            raise ValueError(f"band {self.name} {self.lo_hz}-{self.hi_hz} Hz invalid for {rate_hz} Hz sampling")


BANDS = {
    "theta": BandDef("theta", 4.0, 8.0),
    "alpha": BandDef("alpha", 8.0, 13.0),
    "beta": BandDef("beta", 13.0, 30.0),
    "gamma": BandDef("gamma", 30.0, 45.0),
}


# ---------------------------------------------------------------------------
# filtering
# ---------------------------------------------------------------------------

def design_bandpass(lo_hz: float, hi_hz: float, rate_hz: float, max_taps: int | None = None) -> np.ndarray:
    """Hamming windowed-sinc bandpass taps.

    Transition widths follow min(max(0.25 * edge, 2 Hz), room to DC/Nyquist);
    the Hamming window gives ~53 dB stopband per pass. Length is 3.3 / width,
    capped at ``max_taps`` (forced odd).
    """
    nyq = rate_hz / 2
    if not 0 < lo_hz < hi_hz < nyq:
        raise ValueError(f"bandpass {lo_hz}-{hi_hz} Hz exceeds Nyquist ({nyq} Hz) or is empty")
    lo_trans = min(max(0.25 * lo_hz, 2.0), lo_hz)
    hi_trans = min(max(0.25 * hi_hz, 2.0), nyq - hi_hz)
    numtaps = int(math.ceil(3.3 * rate_hz / min(lo_trans, hi_trans)))
    if max_taps is not None:
        numtaps = min(numtaps, max_taps)
    numtaps |= 1
    return signal.firwin(numtaps, [lo_hz, hi_hz], pass_zero=False, window="hamming", fs=rate_hz)


def bandpass(x, lo_hz: float, hi_hz: float, rate_hz: float, axis: int = -2) -> np.ndarray:
    """Zero-phase (forward-backward) FIR bandpass along the time axis, reflection-padded."""
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[axis]
    taps = design_bandpass(lo_hz, hi_hz, rate_hz, max_taps=max(3, n // 2))
    padlen = min(3 * len(taps), n - 1)
    return signal.filtfilt(taps, [1.0], x, axis=axis, padtype="even", padlen=padlen)


def average_reference(x) -> np.ndarray:
    """Subtract the across-channel mean at every sample (channels on the last axis)."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] < 2:
        raise ValueError("average_reference needs at least 2 channels")
    return x - x.mean(axis=-1, keepdims=True)


def baseline_correct(x, marker: int, pre_window_ms: float, rate_hz: float) -> np.ndarray:
    """Per channel, subtract the mean over [marker - pre_window, marker) of a (T, d) trial."""
    x = np.asarray(x, dtype=np.float64)
    n_pre = int(round(pre_window_ms * rate_hz / 1000.0))
    if n_pre < 1 or marker - n_pre < 0:
        raise ValueError(f"baseline window of {n_pre} samples does not fit before marker {marker}")
    return x - x[marker - n_pre:marker].mean(axis=0, keepdims=True)


def reject_artifacts(ts: TrialSet, threshold_uv: float = 100.0) -> tuple[TrialSet, np.ndarray]:
    """Drop trials whose absolute amplitude exceeds ``threshold_uv`` anywhere."""
    bad = np.abs(ts.trials).max(axis=(1, 2)) > threshold_uv
    return ts.subset(np.flatnonzero(~bad)), np.flatnonzero(bad)


@dataclass
class PrepConfig:
    reject_uv: float = 100.0
    lo_hz: float = 0.1
    hi_hz: float = 30.0
    baseline_ms: float = 500.0


def preprocess(ts: TrialSet, cfg: PrepConfig | None = None) -> tuple[TrialSet, np.ndarray]:
    """reject -> bandpass -> baseline -> average reference. Returns (clean set, rejected indices)."""
    cfg = cfg or PrepConfig()
    kept, rejected = reject_artifacts(ts, cfg.reject_uv)
    if kept.n_trials == 0:
        return kept, rejected
    x = bandpass(kept.trials, cfg.lo_hz, cfg.hi_hz, kept.rate_hz, axis=1)
    x = np.stack([baseline_correct(tr, m, cfg.baseline_ms, kept.rate_hz)
                  for tr, m in zip(x, kept.marker_index)])
    return kept.with_trials(average_reference(x)), rejected


# ---------------------------------------------------------------------------
# band power, ERD/ERS
# ---------------------------------------------------------------------------

def band_power_hilbert(x, band: BandDef, rate_hz: float, axis: int = -2) -> np.ndarray:
    """Squared analytic-signal envelope of the band-limited signal."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[axis] < 8:
        raise ValueError(f"band_power_hilbert: need at least 8 samples, got {x.shape[axis]}")
    band.check(rate_hz)
    filt = bandpass(x, band.lo_hz, band.hi_hz, rate_hz, axis=axis)
    return np.abs(signal.hilbert(filt, axis=axis)) ** 2


def ms_window(start_ms: float, stop_ms: float, rate_hz: float) -> tuple[int, int]:
    """Sample offsets relative to the marker for a [start, stop) window in ms."""
    return int(round(start_ms * rate_hz / 1000.0)), int(round(stop_ms * rate_hz / 1000.0))


def erd_ers(power, marker: int, base_win: tuple[int, int], active_win: tuple[int, int]) -> np.ndarray:
    """Percent change of mean power from baseline to active window, per channel.

    Windows are ``(start, stop)`` sample offsets relative to ``marker``.
    Positive values are synchronization (ERS), negative desynchronization (ERD).
    """
    power = np.asarray(power, dtype=np.float64)
    n = power.shape[0]
    b0, b1 = marker + base_win[0], marker + base_win[1]
    a0, a1 = marker + active_win[0], marker + active_win[1]
    if not (0 <= b0 < b1 <= n and 0 <= a0 < a1 <= n):
        raise ValueError(f"windows {base_win}/{active_win} around marker {marker} exceed length {n}")
    base = power[b0:b1].mean(axis=0)
    active = power[a0:a1].mean(axis=0)
    if np.any(base <= 0):
        raise ValueError("erd_ers: zero baseline power")
    return 100.0 * (active - base) / base


# ---------------------------------------------------------------------------
# statistics
# ---------------------------------------------------------------------------

class WelchResult(NamedTuple):
    t: float
    p: float
    cohens_d: float
    df: float


def welch_stats(a, b) -> WelchResult:
    """Welch t-test (two-sided) and pooled-SD Cohen's d."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.size < 2 or b.size < 2:
        raise ValueError("welch_stats needs at least 2 samples per group")
    na, nb = a.size, b.size
    va, vb = a.var(ddof=1), b.var(ddof=1)
    if va == 0 and vb == 0:
        raise ValueError("welch_stats: zero variance in both groups")
    diff = a.mean() - b.mean()
    se2 = va / na + vb / nb
    t = diff / math.sqrt(se2)
    df = se2 ** 2 / ((va / na) ** 2 / (na - 1) + (vb / nb) ** 2 / (nb - 1))
    p = float(min(1.0, 2.0 * stats.t.sf(abs(t), df)))
    pooled = math.sqrt(((na - 1) * va + (nb - 1) * vb) / (na + nb - 2))
    return WelchResult(float(t), p, float(diff / pooled), float(df))


def rank_channels(erps, marker: int, rate_hz: float, window_ms=(0.0, 500.0)) -> list[int]:
    """Channel indices sorted by |mean amplitude in the window|, averaged over conditions.

    ``erps`` is (n_conditions, T, d) or (T, d) of baseline-corrected means.
    Stable: ties keep channel order.
    """
    erps = np.asarray(erps, dtype=np.float64)
    if erps.ndim == 2:
        erps = erps[None]
    s, e = ms_window(*window_ms, rate_hz)
    lo, hi = marker + s, marker + e
    if not 0 <= lo < hi <= erps.shape[1]:
        raise ValueError(f"ranking window [{lo}, {hi}) outside trial of {erps.shape[1]} samples")
    score = np.abs(erps[:, lo:hi, :].mean(axis=1)).mean(axis=0)
    return np.argsort(-score, kind="stable").tolist()


def condition_erps(ts: TrialSet) -> tuple[list[str], np.ndarray]:
    """Per-event trial averages, (n_events, T, d)."""
    events = ts.events
    labels = np.array(ts.labels)
    return events, np.stack([ts.trials[labels == ev].mean(axis=0) for ev in events])


# ---------------------------------------------------------------------------
# summary table
# ---------------------------------------------------------------------------

@dataclass
class ResponseRow:
    measure: str
    event: str
    value: float
    p: float
    d: float


def neural_response_table(ts: TrialSet, clean: TrialSet | None = None, bands=("beta", "gamma"),
                          n_erp_channels: int = 2, base_ms=(-500.0, 0.0),
                          active_ms=(0.0, 500.0)) -> list[ResponseRow]:
    """ERP modulation (uV) at the top-ranked channels and band ERS (%) per event.

    ERP rows use the preprocessed ``clean`` set (computed if omitted) and test
    per-trial active-window means against baseline-window means. ERS rows use
    raw-trial band power averaged over channels; the value is the ERS of the
    trial-averaged power and the test compares per-trial active vs baseline power.
    """
    if clean is None:
        clean, _ = preprocess(ts)
    rate = ts.rate_hz
    marker = int(clean.marker_index[0])
    events, erps = condition_erps(clean)
    ranked = rank_channels(erps, marker, rate, active_ms)[:n_erp_channels]
    bw, aw = ms_window(*base_ms, rate), ms_window(*active_ms, rate)
    rows: list[ResponseRow] = []

    c_labels = np.array(clean.labels)
    for ch in ranked:
        name = clean.channel_names[ch]
        for ev in events:
            tr = clean.trials[c_labels == ev][:, :, ch]
            m = clean.marker_index[c_labels == ev]
            act = np.array([x[k + aw[0]:k + aw[1]].mean() for x, k in zip(tr, m)])
            base = np.array([x[k + bw[0]:k + bw[1]].mean() for x, k in zip(tr, m)])
            res = _safe_welch(act, base)
            rows.append(ResponseRow(f"ERP {name} (uV)", ev, float(act.mean()), res.p, res.cohens_d))

    r_labels = np.array(ts.labels)
    for bname in bands:
        band = BANDS[bname]
        power = band_power_hilbert(ts.trials, band, rate, axis=1).mean(axis=2)  # (N, T)
        for ev in events:
            sel = r_labels == ev
            pw, mk = power[sel], ts.marker_index[sel]
            act = np.array([x[k + aw[0]:k + aw[1]].mean() for x, k in zip(pw, mk)])
            base = np.array([x[k + bw[0]:k + bw[1]].mean() for x, k in zip(pw, mk)])
            value = 100.0 * (act.mean() - base.mean()) / base.mean()
            res = _safe_welch(act, base)
            rows.append(ResponseRow(f"ERS {bname} {band.lo_hz:g}-{band.hi_hz:g} Hz (%)", ev,
                                    float(value), res.p, res.cohens_d))
    return rows


def _safe_welch(a, b) -> WelchResult:
    if len(a) < 2 or len(b) < 2:
        return WelchResult(float("nan"), float("nan"), float("nan"), float("nan"))
    try:
        return welch_stats(a, b)
    except ValueError:
        return WelchResult(float("nan"), float("nan"), float("nan"), float("nan"))
