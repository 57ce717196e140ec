"""End-to-end acceptance checks, one test per criterion.

Each test prints a ``[PASS]``/``[FAIL] criterion n`` line; the lines are
repeated in the terminal summary.
"""
import json
import math
import time

import mpmath
import numpy as np
import pytest

from decode import tensor as T
from decode.bridge import class_log_probs, fixture_embeddings, info_nce
from decode.cli import main
from decode.denoiser import DenoiserConfig, DenoiserModel, denoise, fourier_synthesis
from decode.io import read_trialset, write_btf
from decode.metrics import ForecastResult, ablation_report, crps, curve_trend, gaussian_crps, horizon_curve
from decode.prep import bandpass, neural_response_table, welch_stats
from decode.sampler import ForecastTask, GuidanceConfig, _reconstruction, sample_batch, sample_forecast
from decode.schedule import make_cosine_schedule, posterior_step, q_sample
from decode.synth import generate, get_preset
from decode.tensor import DiffTensor, grad_check
from decode.trainer import BridgeConfig, Normalizer, TrainConfig, init_state, sliding_windows, train

from test_bridge import brute_info_nce, unit_rows
from test_cli import TINY
from test_denoiser import direct_dft, inverse_dft_of_bins
from test_prep import t_two_sided_p
from test_sampler import reference_inpainting, small_bridge
from test_tensor import _primitive_cases


def test_1_gradients(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(11)
    worst = {}
    for name, f, shape in _primitive_cases():
        w = 0.0
        for _ in range(100):
            x = rng.standard_normal(shape)
            if name in ("abs", "relu"):
                x = x + np.sign(x) * 1e-3
            w = max(w, grad_check(f, x, eps=1e-6))
        worst[name] = w

    bridge = small_bridge(d=2, K=3)
    w = 0.0
    for i in range(100):
        x = rng.standard_normal((16, 2))
        w = max(w, grad_check(lambda v: class_log_probs(v, bridge.table, bridge.encoder)[i % 3], x, eps=1e-6))
    worst["class_log_probs"] = w

    model = DenoiserModel(DenoiserConfig(d=2, n_enc=1, n_dec=1, h_dim=8, n_heads=2, k_freq=2),
                          np.random.default_rng(3))
    w = 0.0
    for i in range(100):
        x = rng.standard_normal((12, 2))
        hist = rng.standard_normal((8, 2))
        t = 1 + i % 20
        w = max(w, grad_check(lambda v: _reconstruction(denoise(v, t, model)[0], hist, 8), x, eps=1e-6))
    worst["reconstruction"] = w

    secs = time.perf_counter() - t0
    bad = {k: v for k, v in worst.items() if v >= 1e-4}
    report(1, "gradient correctness", not bad and secs < 120,
           f"{len(worst)} functions x 100 instances, max err {max(worst.values()):.1e}, {secs:.0f}s"
           + (f", failing {sorted(bad)}" if bad else ""))


def test_2_schedule(report):
    sch = make_cosine_schedule(500, s=0.008)
    ab = sch.alpha_bar[1:]
    decreasing = bool(np.all(np.diff(ab) < 0))
    short = make_cosine_schedule(10)
    x0 = np.random.default_rng(6).standard_normal((32, 4))
    x = q_sample(x0, 10, np.random.default_rng(7).standard_normal(x0.shape), short)
    for t in range(10, 0, -1):
        x = posterior_step(x, x0, t, np.zeros_like(x), short)
    err = float(np.abs(x - x0).max())
    report(2, "cosine schedule and telescoping", decreasing and ab[-1] < 1e-3 and err < 1e-6,
           f"alpha_bar_500 = {ab[-1]:.2e}, telescoping err {err:.1e}")


def test_3_decomposition(report):
    model = DenoiserModel(DenoiserConfig(d=3, n_enc=1, n_dec=1, h_dim=16, n_heads=2, k_freq=3),
                          np.random.default_rng(0))
    x = np.random.default_rng(1).standard_normal((2, 40, 3))
    with T.no_grad():
        x0, parts = denoise(x, np.array([5, 90]), model)
    total = parts["trend"].data.copy()
    for s in parts["seasonal"]:
        total = total + s.data
    total = total + parts["residual"].data
    exact = total.tobytes() == x0.data.tobytes()

    n = 64
    tt = np.arange(n)
    sig = 3 * np.cos(2 * np.pi * 2 * tt / n) + np.cos(2 * np.pi * 5 * tt / n)
    out = fourier_synthesis(DiffTensor(sig[:, None]), 1).data[:, 0]
    err = float(np.abs(out - inverse_dft_of_bins(direct_dft(sig), n, [0, 2])).max())
    report(3, "decomposition", exact and err < 1e-6, f"sum bitwise {'equal' if exact else 'DIFFERENT'}, "
           f"dominant tone err {err:.1e}")


def test_4_info_nce(report):
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(50):
        e = unit_rows(rng.standard_normal((8, 6)))
        E = unit_rows(rng.standard_normal((5, 6)))
        labels = rng.integers(0, 5, size=8)
        tau = float(rng.uniform(0.05, 1.0))
        worst = max(worst, abs(info_nce(e, E, labels, tau).item() - brute_info_nce(e, E, labels, tau)))
    ln2 = info_nce(np.array([[1.0, 0.0]]), np.array([[0.0, 1.0], [0.0, -1.0]]), [0], 0.5).item()
    report(4, "InfoNCE", worst < 1e-9 and ln2 == math.log(2), f"max err {worst:.1e}, uniform K=2 = {ln2!r}")


def test_5_guidance_off(report):
    model = DenoiserModel(DenoiserConfig(d=2, n_enc=1, n_dec=1, h_dim=16, n_heads=2, k_freq=2),
                          np.random.default_rng(0))
    bridge = small_bridge()
    sch = make_cosine_schedule(20)
    task = ForecastTask(np.random.default_rng(5).standard_normal((12, 2)), 8, event="e1")
    g = GuidanceConfig(lambda_h=0.0, lambda_t=0.0, K_max=0, n_samples=3, seed=9)
    out = sample_forecast(task, model, sch, bridge, g)
    ref = reference_inpainting(task, model, sch, 3, 9)
    same = out.samples.tobytes() == ref.tobytes()
    report(5, "guidance-off reduction", same, "bit-identical to reference inpainting" if same
           else f"max diff {np.abs(out.samples - ref).max():.1e}")


# Desk-scale end-to-end setup. Training uses the first 70 trials per event,
# evaluation the remaining 26 per event (52 tasks). A task is the first 128
# samples of a held-out trial: 96 observed, 32 forecast.
DESK = dict(n_trials=96, n_train=70, T_win=128, stride=64, horizon=32, epochs=200, lr=1e-3, batch=32)
DESK_MODEL = DenoiserConfig(d=4, n_enc=2, n_dec=1, h_dim=32, n_heads=4)
DESK_BRIDGE = BridgeConfig(d_emb=32, widths=(16, 32))
DESK_STEPS = 50
DESK_GUIDANCE = dict(lambda_h=0.03, K_max=0, n_samples=4, seed=0)
DESK_LAMBDA_T = 0.3


@pytest.fixture(scope="module")
def desk():
    cfg = get_preset("desk2")
    cfg.n_trials = DESK["n_trials"]
    ts = generate(cfg)
    lab = np.array(ts.labels)
    train_idx = np.concatenate([np.flatnonzero(lab == e)[:DESK["n_train"]] for e in ts.events])
    test_idx = np.concatenate([np.flatnonzero(lab == e)[DESK["n_train"]:] for e in ts.events])
    win = sliding_windows(ts.subset(train_idx), DESK["T_win"], DESK["stride"])
    norm = Normalizer.fit(win.x)
    emb = fixture_embeddings(ts.events)
    tc = TrainConfig(epochs=DESK["epochs"], batch_size=DESK["batch"], lr=DESK["lr"], T_win=DESK["T_win"],
                     stride=DESK["stride"], horizon=DESK["horizon"], seed=0)
    st = init_state(DESK_MODEL, ts.events, np.array([emb[e] for e in ts.events]), tc, norm, T_diff=100,
                    bridge_cfg=DESK_BRIDGE)
    t0 = time.perf_counter()
    train(norm.normalize(win.x), win.labels, st)
    secs = time.perf_counter() - t0

    model, bridge = st.ema_modules()
    sched = st.schedule.respaced(DESK_STEPS)
    h, W = DESK["horizon"], DESK["T_win"]
    tasks, truths, targets = [], [], []
    for i in test_idx:
        w = norm.normalize(ts.trials[i, :W])
        tasks.append(ForecastTask(w[:W - h], h, ts.labels[i]))
        truths.append(ts.trials[i, W - h:W])
        targets.append(bridge.table.index(ts.labels[i]))
    results, class_rate = {}, None
    for name, lam in (("history", 0.0), ("dual", DESK_LAMBDA_T)):
        outs = sample_batch(tasks, model, sched, bridge, GuidanceConfig(lambda_t=lam, **DESK_GUIDANCE),
                            targets=targets)
        results[name] = [ForecastResult(norm.denormalize(o.samples[:, -h:]), y) for o, y in zip(outs, truths)]
        if name == "dual":
            X = np.concatenate([o.samples[:, -h:] for o in outs]).astype(model.dtype)
            pred = class_log_probs(X, bridge.table, bridge.encoder).data.argmax(-1)
            class_rate = float((pred == np.repeat(targets, DESK_GUIDANCE["n_samples"])).mean())
    return dict(log=st.log, secs=secs, epochs=st.epoch, results=results, class_rate=class_rate)


@pytest.mark.slow
def test_6a_training(desk, report):
    first = desk["log"][0]["loss"]
    last = float(np.mean([r["loss"] for r in desk["log"][-20:]]))
    drop = 1 - last / first
    report("6a", "desk2 training loss drop", drop >= 0.5 and desk["secs"] <= 600 and desk["epochs"] <= 200,
           f"step-1 {first:.3f} -> {last:.3f} ({drop:.0%}), {desk['epochs']} epochs in {desk['secs']:.0f}s")


@pytest.mark.slow
def test_6b_dual_beats_history(desk, report):
    rows = {r.variant: r for r in ablation_report(desk["results"], reference="history")}
    dual = rows["dual"]
    n = len(desk["results"]["dual"])
    report("6b", "dual vs history-only MAE", dual.relative_improvement >= 0.10 and dual.p_sign < 0.05 and n >= 50,
           f"history {rows['history'].mae:.3f} uV, dual {dual.mae:.3f} uV, "
           f"{dual.relative_improvement:.1%} better, {dual.n_better}/{n} tasks, sign p = {dual.p_sign:.1e}")


@pytest.mark.slow
def test_6c_event_specificity(desk, report):
    report("6c", "text-guided samples classified to the conditioned event", desk["class_rate"] >= 0.8,
           f"{desk['class_rate']:.1%}")


@pytest.mark.slow
def test_6d_horizon_curve(desk, report):
    _, curve, _ = horizon_curve(desk["results"]["dual"])
    rho = curve_trend(curve)
    report("6d", "horizon MAE increases", rho > 0.5,
           f"Spearman rho = {rho:.3f}, step 1 {curve[0]:.2f} uV, step {len(curve)} {curve[-1]:.2f} uV")


def welch_oracle(a, b):
    """Welch t, Satterthwaite df and pooled-SD Cohen's d at 50 digits."""
    mpmath.mp.dps = 50
    a = [mpmath.mpf(float(v)) for v in a]
    b = [mpmath.mpf(float(v)) for v in b]
    na, nb = len(a), len(b)
    ma, mb = sum(a) / na, sum(b) / nb
    va = sum((v - ma) ** 2 for v in a) / (na - 1)
    vb = sum((v - mb) ** 2 for v in b) / (nb - 1)
    se2 = va / na + vb / nb
    t = (ma - mb) / mpmath.sqrt(se2)
    df = se2 ** 2 / ((va / na) ** 2 / (na - 1) + (vb / nb) ** 2 / (nb - 1))
    d = (ma - mb) / mpmath.sqrt(((na - 1) * va + (nb - 1) * vb) / (na + nb - 2))
    return float(t), float(df), float(d)


def test_7_preprocessing(report):
    ts = generate(get_preset("driving5"))
    rows = {(r.measure.split()[1], r.event): r.value for r in neural_response_table(ts) if r.measure.startswith("ERS")}
    beta, gamma = rows[("beta", "braking")], rows[("gamma", "braking")]
    ers_ok = abs(beta - 16.0) <= 3 and abs(gamma - 27.7) <= 3

    rng = np.random.default_rng(3)
    werr = 0.0
    for _ in range(30):
        na, nb = rng.integers(2, 40, size=2)
        a = rng.normal(rng.normal(), rng.uniform(0.5, 3), na)
        b = rng.normal(rng.normal(), rng.uniform(0.5, 3), nb)
        r = welch_stats(a, b)
        t, df, d = welch_oracle(a, b)
        werr = max(werr, abs(r.t - t), abs(r.cohens_d - d), abs(r.p - t_two_sided_p(t, df)))

    tt = np.arange(2000) / 1000
    x = np.sin(2 * np.pi * 50 * tt)[:, None]
    y = bandpass(x, 0.1, 30, 1000)
    db = 10 * np.log10((y[200:-200] ** 2).mean() / (x[200:-200] ** 2).mean())
    report(7, "preprocessing oracles", ers_ok and werr < 1e-6 and db <= -40,
           f"braking ERS beta {beta:.1f}% (16.0), gamma {gamma:.1f}% (27.7); Welch max err {werr:.1e}; "
           f"50 Hz {db:.1f} dB")


def test_8_crps(report):
    ens = np.random.default_rng(4).standard_normal((10000, 1, 1))
    v = crps(ForecastResult(ens, np.zeros((1, 1))))
    exact = gaussian_crps(0.0, 1.0, 0.0)
    rel = abs(v - exact) / exact
    degenerate = crps(ForecastResult(np.full((8, 5, 3), 1.7), np.full((5, 3), 1.7)))
    report(8, "CRPS estimator", rel < 0.02 and degenerate == 0.0,
           f"Gaussian {v:.4f} vs {exact:.4f} ({rel:.2%}), degenerate {degenerate!r}")


def test_9_reproducibility(tmp_path, report):
    (tmp_path / "tiny.cfg").write_text(TINY)
    (tmp_path / "emb.json").write_text(json.dumps(fixture_embeddings(["braking", "acceleration"], dim=6)))
    cfg = str(tmp_path / "tiny.cfg")
    data, run = tmp_path / "data", tmp_path / "run"
    runs = {
        "synth": ["synth", "--preset", "desk2", "--seed", "3", "--n-trials", "6", "--out", str(data)],
        "train": ["train", "--config", cfg, "--data", str(data), "--embeddings", str(tmp_path / "emb.json"),
                  "--out", str(run)],
        "forecast": ["forecast", "--config", cfg, "--checkpoint", str(run / "checkpoint.dckp"),
                     "--history-file", str(tmp_path / "hist.btf"), "--event", "braking", "--horizon", "16",
                     "--samples", "3", "--out-dir", str(tmp_path / "fc")],
        "eval": ["eval", "--config", cfg, "--checkpoint", str(run / "checkpoint.dckp"), "--data", str(data),
                 "--max-tasks", "4", "--out-dir", str(tmp_path / "ev")],
    }
    out_dirs = {"synth": data, "train": run, "forecast": tmp_path / "fc", "eval": tmp_path / "ev"}
    failures = []
    for name, argv in runs.items():
        if main(argv) != 0:
            failures.append(f"{name} failed")
            continue
        if name == "synth":
            write_btf(tmp_path / "hist.btf", read_trialset(data).trials[0, :80])
        if main(["replay", str(out_dirs[name] / "manifest.json"), "--out", str(tmp_path / f"re_{name}")]) != 0:
            failures.append(f"{name} replay differs")

    resumed, full = tmp_path / "resumed", tmp_path / "full"
    main(["train", "--data", str(data), "--resume", str(run / "checkpoint.dckp"), "--epochs", "4",
          "--out", str(resumed)])
    main(["train", "--config", cfg, "--data", str(data), "--embeddings", str(tmp_path / "emb.json"),
          "--epochs", "4", "--out", str(full)])
    same_loss = (resumed / "loss.csv").read_bytes() == (full / "loss.csv").read_bytes()
    if not same_loss:
        failures.append("resumed loss sequence differs")
    report(9, "reproducibility", not failures,
           "synth/train/forecast/eval replays bit-identical, resume loss sequence identical" if not failures
           else "; ".join(failures))
