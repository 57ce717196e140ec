import time

import numpy as np
import pytest

from decode.prep import BANDS, band_power_hilbert, erd_ers, welch_stats
from decode.synth import (
    DRIVING5_CHANNELS,
    Burst,
    Deflection,
    EventSpec,
    SynthConfig,
    generate,
    get_preset,
    presets,
)


def ers_of(ts, band, event=None):
    labels = np.array(ts.labels)
    sel = np.ones(len(labels), bool) if event is None else labels == event
    p = band_power_hilbert(ts.trials[sel], BANDS[band], ts.rate_hz, axis=1).mean(axis=0)
    m = int(ts.marker_index[0])
    n = int(round(0.5 * ts.rate_hz))
    return erd_ers(p, m, (-n, 0), (0, n)).mean()


def single_event(percent=0.0, band="beta", amp=0.0, n_trials=64, seed=0):
    chans = list(DRIVING5_CHANNELS)
    erp = (Deflection(("Fpz",), amp, 250, 60),) if amp else ()
    ers = (Burst(band, percent),) if percent else ()
    return SynthConfig([EventSpec("x", erp, ers)], chans, n_trials=n_trials, T=2000, rate_hz=1000.0,
                       marker_index=500, seed=seed)


class TestGenerate:
    def test_null_event(self):
        ts = generate(single_event())
        assert abs(ers_of(ts, "beta")) < 3
        assert abs(ers_of(ts, "gamma")) < 3

    @pytest.mark.parametrize("band,target", [("beta", 16.0), ("gamma", 27.7)])
    def test_ers_recovery(self, band, target):
        ts = generate(single_event(target, band))
        assert abs(ers_of(ts, band) - target) <= 3

    def test_opposite_polarity_separable(self):
        chans = ["a", "b"]
        events = [EventSpec("up", (Deflection(("a",), 1.5, 250, 80),)),
                  EventSpec("down", (Deflection(("a",), -1.5, 250, 80),))]
        ts = generate(SynthConfig(events, chans, n_trials=64, seed=5))
        labels = np.array(ts.labels)
        win = ts.trials[:, 500:1000, 0].mean(axis=1)
        assert welch_stats(win[labels == "up"], win[labels == "down"]).p < 0.01

    def test_deterministic(self):
        cfg = get_preset("desk2")
        a, b = generate(cfg), generate(cfg)
        assert a.trials.tobytes() == b.trials.tobytes()
        assert a.labels == b.labels

    def test_seed_changes_output(self):
        cfg = get_preset("desk2")
        other = get_preset("desk2")
        other.seed = 1
        assert not np.array_equal(generate(cfg).trials, generate(other).trials)

    def test_trials_independent(self):
        ts = generate(single_event(n_trials=40))
        x = ts.trials[:, :, 0]
        c = np.corrcoef(x)
        off = c[np.triu_indices(len(x), 1)]
        assert abs(off.mean()) < 0.1
        assert np.abs(off).mean() < 0.1

    def test_unstable_ar(self):
        cfg = single_event()
        cfg.ar = (1.5, -0.4)  # a1 + a2 > 1: a real root inside the unit circle
        with pytest.raises(ValueError, match="stable"):
            generate(cfg)

    def test_unknown_channel(self):
        cfg = SynthConfig([EventSpec("x", (Deflection(("zz",), 1, 100, 10),))], ["a"], n_trials=1)
        with pytest.raises(ValueError, match="unknown channels"):
            generate(cfg)


class TestPresets:
    def test_names(self):
        assert {"driving5", "desk2"} <= set(presets())

    def test_driving5_shape(self):
        cfg = get_preset("driving5")
        cfg.n_trials = 1
        ts = generate(cfg)
        assert ts.trials.shape == (5, 2000, 14)
        assert ts.events == ["braking", "turning", "lane changing", "acceleration", "stable driving"]

    def test_desk2_budget(self):
        cfg = get_preset("desk2")
        cfg.n_trials = 128
        t0 = time.perf_counter()
        ts = generate(cfg)
        assert time.perf_counter() - t0 < 5
        assert ts.trials.shape == (256, 256, 4) and ts.rate_hz == 128

    def test_unknown(self):
        with pytest.raises(KeyError, match="desk2"):
            get_preset("nope")
