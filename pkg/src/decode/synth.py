"""Deterministic synthetic event-locked EEG-like trials.

Each trial is an AR(2) background plus, per event, Gaussian-windowed ERP
deflections on channel groups and band-limited bursts whose gain is solved
so that the Hilbert band power in the active window rises by a target
percentage over baseline.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy import linalg, signal

from .prep import BANDS, BandDef, TrialSet, design_bandpass


@dataclass(frozen=True)
class Deflection:
    channels: tuple[str, ...]
    amplitude_uv: float
    latency_ms: float
    width_ms: float  # Gaussian sigma


@dataclass(frozen=True)
class Burst:
    band: str
    percent: float  # target ERS in the active window
    channels: tuple[str, ...] = ()  # empty = all channels
    onset_ms: float = 0.0
    duration_ms: float = 500.0


@dataclass(frozen=True)
class EventSpec:
    label: str
    erp: tuple[Deflection, ...] = ()
    ers: tuple[Burst, ...] = ()


@dataclass
class SynthConfig:
    events: list[EventSpec]
    channel_names: list[str]
    n_trials: int = 64  # per event
    T: int = 2000
    rate_hz: float = 1000.0
    marker_index: int = 500
    ar: tuple[float, float] = (1.0, -0.3)
    noise_scale: float = 3.0  # innovation std, uV
    seed: int = 0
    base_ms: tuple[float, float] = (-500.0, 0.0)
    active_ms: tuple[float, float] = (0.0, 500.0)

    @property
    def d(self) -> int:
        return len(self.channel_names)

    def validate(self) -> None:
        a1, a2 = self.ar
        if not (abs(a2) < 1 and a1 + a2 < 1 and a2 - a1 < 1):
            raise ValueError(f"AR coefficients {self.ar} are not stable (characteristic roots on/inside unit circle)")
        if not 0 <= self.marker_index < self.T:
            raise ValueError(f"marker index {self.marker_index} outside [0, {self.T})")
        for lo, hi in (self.base_ms, self.active_ms):
            if not 0 <= self.marker_index + _ms(self, lo) < self.marker_index + _ms(self, hi) <= self.T:
                raise ValueError(f"window {lo}-{hi} ms around the marker exceeds the trial")
        if self.n_trials < 1 or not self.events:
            raise ValueError("need at least one event and one trial per event")
        known = set(self.channel_names)
        for ev in self.events:
            for item in (*ev.erp, *ev.ers):
                missing = set(item.channels) - known
                if missing:
                    raise ValueError(f"event {ev.label!r} references unknown channels {sorted(missing)}")
            for b in ev.ers:
                if b.band not in BANDS:
                    raise ValueError(f"unknown band {b.band!r}; known: {sorted(BANDS)}")
                BANDS[b.band].check(self.rate_hz)
                if b.percent < 0:
                    raise ValueError("burst percent must be >= 0 (additive bursts cannot desynchronize)")

    def to_dict(self) -> dict:
        return asdict(self)


def _ms(cfg: SynthConfig, ms: float) -> int:
    return int(round(ms * cfg.rate_hz / 1000.0))


def _zero_phase_kernel(band: BandDef, rate_hz: float, n: int) -> np.ndarray:
    taps = design_bandpass(band.lo_hz, band.hi_hz, rate_hz, max_taps=max(3, n // 2))
    return np.convolve(taps, taps[::-1])  # forward-backward == convolving with the autocorrelation


def burst_gain(cfg: SynthConfig, burst: Burst) -> tuple[float, np.ndarray]:
    """Carrier amplitude and unit envelope for a burst hitting its ERS target.

    Background and burst are independent, so expected band powers add. The
    background gives a stationary level P_bg from the AR spectrum and the
    filter response. The burst is env * (white noise through the band filter),
    measured through the same filter again; its expected power per unit
    amplitude over a window is the squared Frobenius norm of
    (measurement rows) @ diag(env) @ (carrier filter), which accounts for the
    envelope smearing out of the active window and into the baseline.
    Solving (b_act - b_base) A^2 = r (P_bg + b_base A^2) gives A.
    """
    band = BANDS[burst.band]
    n = cfg.T
    env = _burst_envelope(cfg, burst)
    if burst.percent == 0 or not env.any():
        return 0.0, env
    kern = _zero_phase_kernel(band, cfg.rate_hz, n)
    w = np.linspace(0, np.pi, 8192)
    _, h = signal.freqz(kern, [1.0], worN=w)
    _, ar = signal.freqz([1.0], [1.0, -cfg.ar[0], -cfg.ar[1]], worN=w)
    p_bg = cfg.noise_scale ** 2 * np.trapezoid(np.abs(ar * h) ** 2, w) / np.pi

    conv = linalg.convolution_matrix(kern, n, mode="same")
    support = np.flatnonzero(env)
    shaped = env[support, None] * conv[support]

    def window_power(lo_ms, hi_ms):
        rows = slice(cfg.marker_index + _ms(cfg, lo_ms), cfg.marker_index + _ms(cfg, hi_ms))
        m = conv[rows][:, support] @ shaped
        return float(np.sum(m * m)) / m.shape[0]

    r = burst.percent / 100.0
    b_act = window_power(*cfg.active_ms)
    b_base = window_power(*cfg.base_ms)
    denom = b_act - (1 + r) * b_base
    if denom <= 0:
        raise ValueError(f"{burst.band} burst leaks too far into the baseline to reach {burst.percent}%")
    return math.sqrt(r * p_bg / denom), env


def _burst_envelope(cfg: SynthConfig, b: Burst) -> np.ndarray:
    env = np.zeros(cfg.T)
    start = cfg.marker_index + _ms(cfg, b.onset_ms)
    length = _ms(cfg, b.duration_ms)
    stop = min(cfg.T, start + length)
    if stop > start:
        env[start:stop] = signal.windows.tukey(length, alpha=0.25)[:stop - start]
    return env


def _erp_wave(cfg: SynthConfig, ev: EventSpec) -> np.ndarray:
    t_ms = (np.arange(cfg.T) - cfg.marker_index) * 1000.0 / cfg.rate_hz
    wave = np.zeros((cfg.T, cfg.d))
    for dfl in ev.erp:
        g = dfl.amplitude_uv * np.exp(-0.5 * ((t_ms - dfl.latency_ms) / dfl.width_ms) ** 2)
        for ch in dfl.channels:
            wave[:, cfg.channel_names.index(ch)] += g
    return wave


def generate(cfg: SynthConfig) -> TrialSet:
    """Trials ordered event by event; trial i draws from the stream (seed, i)."""
    cfg.validate()
    d, n = cfg.d, cfg.T
    burn = 256
    ar_den = [1.0, -cfg.ar[0], -cfg.ar[1]]
    plans = []
    for ev in cfg.events:
        bursts = []
        for b in ev.ers:
            amp, env = burst_gain(cfg, b)
            if amp > 0:
                band = BANDS[b.band]
                taps = design_bandpass(band.lo_hz, band.hi_hz, cfg.rate_hz, max_taps=max(3, n // 2))
                mask = np.zeros(d, dtype=bool)
                idx = [cfg.channel_names.index(c) for c in b.channels] if b.channels else range(d)
                mask[list(idx)] = True
                bursts.append((amp, env, taps, mask))
        plans.append((_erp_wave(cfg, ev), bursts))

    trials = np.empty((len(cfg.events) * cfg.n_trials, n, d))
    labels = []
    i = 0
    for ev, (wave, bursts) in zip(cfg.events, plans):
        for _ in range(cfg.n_trials):
            rng = np.random.default_rng([cfg.seed, i])
            e = rng.standard_normal((n + burn, d)) * cfg.noise_scale
            x = signal.lfilter([1.0], ar_den, e, axis=0)[burn:] + wave
            for amp, env, taps, mask in bursts:
                carrier = signal.filtfilt(taps, [1.0], rng.standard_normal((n, d)), axis=0,
                                          padtype="even", padlen=min(3 * len(taps), n - 1))
                x[:, mask] += amp * env[:, None] * carrier[:, mask]
            trials[i] = x
            labels.append(ev.label)
            i += 1
    return TrialSet(trials, labels, np.full(len(labels), cfg.marker_index), cfg.rate_hz,
                    list(cfg.channel_names))


# ---------------------------------------------------------------------------
# presets
# ---------------------------------------------------------------------------

DRIVING5_CHANNELS = ["Fpz", "P7", "P8", "T8", "PO7", "O1", "PO8", "PO5", "CP2", "Pz", "C2", "CP3", "CP4", "FC4"]
_FRONTAL = ("Fpz", "FC4")
_PARIETAL = ("Pz", "CP2", "CP3", "CP4")


def _driving5() -> SynthConfig:
    def ev(label, front, pari, beta, gamma):
        erp = []
        if front:
            erp.append(Deflection(_FRONTAL, front, 250.0, 80.0))
        if pari:
            erp.append(Deflection(_PARIETAL, pari, 300.0, 80.0))
        ers = tuple(Burst(b, p) for b, p in (("beta", beta), ("gamma", gamma)) if p)
        return EventSpec(label, tuple(erp), ers)

    events = [
        ev("braking", 1.06, -1.42, 16.0, 27.7),
        ev("turning", 0.81, -0.9, 10.0, 15.0),
        ev("lane changing", 0.70, -0.7, 8.0, 12.0),
        ev("acceleration", 0.50, -0.5, 6.0, 10.0),
        ev("stable driving", 0.0, 0.0, 0.0, 0.0),
    ]
    return SynthConfig(events, list(DRIVING5_CHANNELS), n_trials=64, T=2000, rate_hz=1000.0,
                       marker_index=500, ar=(1.0, -0.3), noise_scale=3.0)


DESK2_CHANNELS = ["Fz", "Cz", "Pz", "Oz"]


def _desk2() -> SynthConfig:
    # Opposite-polarity slow late components. In a 128-sample window starting
    # at trial onset the last 32 samples span 250-492 ms post-stimulus, where
    # the deflection builds toward its peak; earlier it is below the noise.
    front, back = ("Fz", "Cz"), ("Pz", "Oz")
    lat, width, amp = 500.0, 120.0, 8.0
    events = [
        EventSpec("braking", (Deflection(front, amp, lat, width), Deflection(back, -amp, lat, width))),
        EventSpec("acceleration", (Deflection(front, -amp, lat, width), Deflection(back, amp, lat, width))),
    ]
    return SynthConfig(events, list(DESK2_CHANNELS), n_trials=64, T=256, rate_hz=128.0,
                       marker_index=64, ar=(1.8, -0.85), noise_scale=0.5)


_PRESETS = {"driving5": _driving5, "desk2": _desk2}


def presets() -> dict[str, SynthConfig]:
    return {name: fn() for name, fn in _PRESETS.items()}


def get_preset(name: str) -> SynthConfig:
    try:
        return _PRESETS[name]()
    except KeyError:
        raise KeyError(f"unknown preset {name!r}; available: {', '.join(sorted(_PRESETS))}") from None
