"""``decode`` command line: synth, prep, train, forecast, eval, embed-import.

Every run writes ``manifest.json`` into its output directory with the full
effective config, seeds, package versions, the argv and sha256 digests of
inputs and outputs. ``decode replay MANIFEST --out DIR`` reruns a manifest
into a new directory; outputs are bit-identical.

Exit codes: 0 ok, 1 domain error (message printed verbatim), 2 usage.
"""

from __future__ import annotations

import os
import sys

# DECODE_THREADS caps BLAS worker threads; must be set before numpy loads.
_THREADS = os.environ.get("DECODE_THREADS")
if _THREADS is not None and _THREADS.strip().isdigit() and int(_THREADS) > 0:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[_var] = _THREADS.strip()

import argparse  # noqa: E402
import json  # noqa: E402
import logging  # noqa: E402
import platform  # noqa: E402
import warnings  # noqa: E402
from pathlib import Path  # noqa: E402

import numpy as np  # noqa: E402
import scipy  # noqa: E402

from . import __version__  # noqa: E402
from . import config as C  # noqa: E402
from .bridge import _warn_collisions, class_log_probs, load_embedding_file  # noqa: E402
from .io import (  # noqa: E402
    FormatError,
    read_btf,
    read_trialset,
    sha256_file,
    write_btf,
    write_trialset,
)
from .metrics import (  # noqa: E402
    ForecastResult,
    ablation_report,
    crps,
    curve_trend,
    horizon_curve,
    mae,
    write_ablation_csv,
    write_horizon_csv,
)
from .prep import preprocess, neural_response_table  # noqa: E402
from .sampler import ForecastTask, GuidanceConfig, sample_batch  # noqa: E402
from .synth import get_preset, generate  # noqa: E402
from .trainer import (  # noqa: E402
    Normalizer,
    init_state,
    load_checkpoint,
    save_checkpoint,
    sliding_windows,
    train,
    write_loss_log,
)

log = logging.getLogger("decode")

DOMAIN_ERRORS = (ValueError, KeyError, FileNotFoundError, FloatingPointError, FormatError, C.ConfigError)
EVAL_CHUNK = 16  # tasks per sampling batch


# ---------------------------------------------------------------------------
# run bookkeeping
# ---------------------------------------------------------------------------

class Run:
    def __init__(self, command: str, argv: list[str], out: Path, cfg: C.Config):
        self.command, self.argv, self.out, self.cfg = command, list(argv), Path(out), cfg
        self.inputs: dict[str, str] = {}
        self.outputs: list[Path] = []
        self.seeds: dict[str, int] = {}
        self.out.mkdir(parents=True, exist_ok=True)

    def input(self, path) -> Path:
        path = Path(path)
        if path.is_dir():
            for p in sorted(path.iterdir()):
                if p.is_file() and p.name != "manifest.json":
                    self.inputs[str(p)] = sha256_file(p)
        elif path.is_file():
            self.inputs[str(path)] = sha256_file(path)
        else:
            raise FileNotFoundError(f"input not found: {path}")
        return path

    def output(self, name: str) -> Path:
        p = self.out / name
        self.outputs.append(p)
        return p

    def finish(self, extra: dict | None = None) -> None:
        cfg_path = self.output("config.txt")
        cfg_path.write_text(self.cfg.render(), encoding="utf-8")
        manifest = {
            "command": self.command,
            "argv": self.argv,
            "config": self.cfg.to_dict(),
            "seeds": self.seeds,
            "versions": {"decode": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
                         "python": platform.python_version()},
            "inputs": self.inputs,
            "outputs": {p.name: sha256_file(p) for p in sorted(self.outputs) if p.exists()},
        }
        if extra:
            manifest.update(extra)
        (self.out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n",
                                                encoding="utf-8")


def _config(args) -> C.Config:
    return C.load(args.config, args.set)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_synth(args, argv) -> None:
    cfg = _config(args)
    for key, val in (("preset", args.preset), ("seed", args.seed), ("n_trials", args.n_trials)):
        if val is not None:
            cfg.set(f"synth.{key}", val)
    run = Run("synth", argv, args.out, cfg)
    sc = get_preset(cfg["synth.preset"])
    sc.seed = cfg["synth.seed"]
    if cfg["synth.n_trials"] > 0:
        sc.n_trials = cfg["synth.n_trials"]
    run.seeds["synth"] = sc.seed
    ts = generate(sc)
    run.outputs.extend(write_trialset(run.out, ts))
    run.finish()
    print(f"wrote {ts.n_trials} trials ({ts.n_samples} x {ts.n_channels}) to {run.out}")


def cmd_prep(args, argv) -> None:
    cfg = _config(args)
    run = Run("prep", argv, args.out, cfg)
    ts = read_trialset(run.input(args.data))
    *_, pcfg = C.build(cfg, ts.n_channels)
    clean, rejected = preprocess(ts, pcfg)
    if clean.n_trials == 0:
        raise ValueError(f"all {ts.n_trials} trials rejected at {pcfg.reject_uv} uV")
    run.outputs.extend(write_trialset(run.out, clean))
    rej = run.output("rejected.csv")
    rej.write_text("trial\n" + "".join(f"{int(i)}\n" for i in rejected), encoding="utf-8")
    rows = neural_response_table(ts, clean)
    resp = run.output("responses.csv")
    resp.write_text("measure,event,value,p,d\n" + "".join(
        f"{r.measure},{r.event},{r.value!r},{r.p!r},{r.d!r}\n" for r in rows), encoding="utf-8")
    run.finish()
    print(f"kept {clean.n_trials}/{ts.n_trials} trials; {len(rows)} response rows")


def cmd_train(args, argv) -> None:
    cfg = _config(args)
    if args.epochs is not None:
        cfg.set("train.epochs", args.epochs)
    run = Run("train", argv, args.out, cfg)
    ts = read_trialset(run.input(args.data))
    ckpt = run.output("checkpoint.dckp")
    if args.resume:
        state = load_checkpoint(run.input(args.resume))
        if state.model.cfg.d != ts.n_channels:
            raise ValueError(f"checkpoint expects {state.model.cfg.d} channels, data has {ts.n_channels}")
        if args.epochs is not None:
            state.train_cfg.epochs = args.epochs
        tcfg = state.train_cfg
    else:
        model_cfg, bridge_cfg, tcfg, _, _ = C.build(cfg, ts.n_channels)
        if args.embeddings is None:
            raise ValueError("--embeddings is required unless --resume is given")
        labels, raw = load_embedding_file(run.input(args.embeddings))
        _warn_collisions(labels, raw)
        missing = sorted(set(ts.labels) - set(labels))
        if missing:
            raise ValueError(f"data labels {missing} not in embedding table; known labels: {', '.join(labels)}")
    win = sliding_windows(ts, tcfg.T_win, tcfg.stride)
    if len(win) == 0:
        raise ValueError(f"no {tcfg.T_win}-sample window contains a marker; check train.T_win and train.stride")
    if not args.resume:
        norm = Normalizer.fit(win.x)
        state = init_state(model_cfg, labels, raw, tcfg, norm, cfg["diffusion.T_diff"], cfg["diffusion.s"],
                           bridge_cfg)
    run.seeds["train"] = tcfg.seed
    budget = cfg["train.max_seconds"] or None
    train(state.norm.normalize(win.x), win.labels, state, checkpoint_path=ckpt, max_seconds=budget)
    save_checkpoint(state, ckpt)
    write_loss_log(state, run.output("loss.csv"))
    run.finish({"windows": len(win), "epochs_done": state.epoch, "steps": state.step})
    first, last = state.log[0]["loss"], state.log[-1]["loss"]
    print(f"trained {state.epoch} epochs ({state.step} steps) on {len(win)} windows; loss {first:.4f} -> {last:.4f}")


def _guidance(cfg: C.Config, args) -> GuidanceConfig:
    overrides = {"n_samples": args.samples, "seed": args.seed, "lambda_h": args.lambda_h,
                 "lambda_t": args.lambda_t, "K_max": args.k_max}
    for k, v in overrides.items():
        if v is not None:
            cfg.set(f"guidance.{k}", v)
    return C.build(cfg, 1)[3]


def _schedule(state, cfg: C.Config):
    sched = state.schedule
    n = cfg["diffusion.sample_steps"]
    return sched.respaced(n) if 0 < n < sched.T_diff else sched


def cmd_forecast(args, argv) -> None:
    cfg = _config(args)
    gcfg = _guidance(cfg, args)
    run = Run("forecast", argv, args.out_dir, cfg)
    state = load_checkpoint(run.input(args.checkpoint))
    model, bridge = state.ema_modules()
    history = read_btf(run.input(args.history_file))
    if history.ndim != 2 or history.shape[1] != model.cfg.d:
        raise ValueError(f"history must be (n_obs, {model.cfg.d}), got {history.shape}")
    horizon = args.horizon or state.train_cfg.horizon
    if args.event is None:
        if gcfg.lambda_t > 0:
            log.info("no --event given: text guidance off")
        cfg.set("guidance.lambda_t", 0.0)
        gcfg = C.build(cfg, 1)[3]
        target = 0
    else:
        target = bridge.table.index(args.event)
    if len(history) + horizon != state.train_cfg.T_win:
        warnings.warn(f"history {len(history)} + horizon {horizon} differs from the training window "
                      f"{state.train_cfg.T_win}", stacklevel=1)
    task = ForecastTask(state.norm.normalize(history), horizon, args.event)
    run.seeds["guidance"] = gcfg.seed
    out = sample_batch([task], model, _schedule(state, cfg), bridge, gcfg, targets=[target])[0]
    ens = state.norm.denormalize(out.samples)
    write_btf(run.output("ensemble.btf"), ens)
    write_btf(run.output("trend.btf"), state.norm.denormalize(out.trend))
    write_btf(run.output("seasonal.btf"), out.seasonal * state.norm.std)
    q = np.percentile(ens, [5, 25, 75, 95], axis=0)
    lines = ["step,channel,mean,median,q05,q25,q75,q95"]
    mean, med = ens.mean(axis=0), np.median(ens, axis=0)
    names = [f"ch{j}" for j in range(ens.shape[2])]
    for i in range(ens.shape[1]):
        for j, name in enumerate(names):
            vals = (mean[i, j], med[i, j], q[0, i, j], q[1, i, j], q[2, i, j], q[3, i, j])
            lines.append(f"{i + 1},{name}," + ",".join(repr(float(v)) for v in vals))
    run.output("summary.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    run.finish({"event": args.event, "horizon": horizon, "langevin_iters": {str(k): v for k, v in
                                                                            sorted(out.langevin_iters.items())}})
    print(f"wrote {ens.shape[0]} x {ens.shape[1]} x {ens.shape[2]} ensemble to {run.out}")


def cmd_eval(args, argv) -> None:
    cfg = _config(args)
    gcfg = _guidance(cfg, args)
    run = Run("eval", argv, args.out_dir, cfg)
    state = load_checkpoint(run.input(args.checkpoint))
    model, bridge = state.ema_modules()
    ts = read_trialset(run.input(args.data))
    W = state.train_cfg.T_win
    h = args.horizon or state.train_cfg.horizon
    s0 = args.window_start
    if s0 < 0 or s0 + W > ts.n_samples:
        raise ValueError(f"window [{s0}, {s0 + W}) outside trials of length {ts.n_samples}")
    idx = list(range(ts.n_trials))[: args.max_tasks or None]
    tasks = [ForecastTask(state.norm.normalize(ts.trials[i, s0:s0 + W - h]), h, ts.labels[i]) for i in idx]
    truths = [ts.trials[i, s0 + W - h:s0 + W] for i in idx]
    targets = [bridge.table.index(ts.labels[i]) for i in idx]
    sched = _schedule(state, cfg)
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    run.seeds["guidance"] = gcfg.seed
    results, summary = {}, {}
    for name in variants:
        if name == "history":
            vcfg = GuidanceConfig(**{**gcfg.to_dict(), "lambda_t": 0.0})
        elif name == "dual":
            vcfg = gcfg
        elif name == "unguided":
            vcfg = GuidanceConfig(**{**gcfg.to_dict(), "lambda_t": 0.0, "lambda_h": 0.0, "K_max": 0})
        else:
            raise ValueError(f"unknown variant {name!r}; known: history, dual, unguided")
        outs = []
        for c in range(0, len(tasks), EVAL_CHUNK):
            sl = slice(c, c + EVAL_CHUNK)
            outs += sample_batch(tasks[sl], model, sched, bridge, vcfg, targets=targets[sl],
                                 task_ids=range(c, c + len(tasks[sl])))
        res = [ForecastResult(state.norm.denormalize(o.samples), tr, {"trial": i})
               for o, tr, i in zip(outs, truths, idx)]
        results[name] = res
        hz = run.output(f"horizon_{name}.csv")
        write_horizon_csv(res, hz)
        _, curve, _ = horizon_curve(res)
        horizons = np.concatenate([o.samples for o in outs]).astype(model.dtype)
        pred = class_log_probs(horizons, bridge.table, bridge.encoder).data.argmax(axis=-1)
        want = np.repeat(targets, vcfg.n_samples)
        summary[name] = {"mae_uv": float(np.mean([mae(r) for r in res])),
                         "crps_uv": float(np.mean([crps(r) for r in res])),
                         "class_rate": float(np.mean(pred == want)),
                         "curve_spearman": curve_trend(curve) if len(curve) > 1 else float("nan"),
                         "guidance": vcfg.to_dict()}
    rows = ablation_report(results)
    write_ablation_csv(rows, run.output("ablation.csv"))
    for r in rows:
        summary[r.variant].update({"relative_improvement": r.relative_improvement, "n_better": r.n_better,
                                   "n_worse": r.n_worse, "p_sign": r.p_sign})
    run.output("metrics.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    run.finish({"tasks": len(tasks), "window_start": s0, "horizon": h})
    for name, s in summary.items():
        print(f"{name}: MAE {s['mae_uv']:.4f} uV  CRPS {s['crps_uv']:.4f}  class {s['class_rate']:.3f}  "
              f"rho {s['curve_spearman']:.3f}  rel {s['relative_improvement']:+.3f}  p {s['p_sign']:.3g}")


def _read_embedding_csv(path: Path) -> tuple[list[str], np.ndarray]:
    labels, rows = [], []
    for k, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = [p.strip() for p in line.split(",")]
        try:
            rows.append([float(v) for v in parts[1:]])
        except ValueError:
            if k == 1:
                continue  # header
            raise ValueError(f"{path}:{k}: non-numeric vector entry") from None
        labels.append(parts[0])
    if not labels:
        raise ValueError(f"{path}: no embedding rows")
    if len(set(labels)) != len(labels):
        raise ValueError(f"{path}: duplicate labels")
    if len({len(r) for r in rows}) != 1 or not rows[0]:
        raise ValueError(f"{path}: vector dimension mismatch")
    return labels, np.array(rows)


def cmd_embed_import(args, argv) -> None:
    run = Run("embed-import", argv, args.out, C.defaults())
    src = run.input(args.input)
    labels, raw = _read_embedding_csv(src) if src.suffix.lower() == ".csv" else load_embedding_file(src)
    if not np.all(np.isfinite(raw)):
        raise ValueError(f"{src}: non-finite vector entries")
    _warn_collisions(labels, raw)
    body = "{\n" + ",\n".join(f" {json.dumps(l)}: [{', '.join(repr(float(v)) for v in r)}]"
                              for l, r in zip(labels, raw)) + "\n}\n"
    run.output("embeddings.json").write_text(body, encoding="utf-8")
    run.finish({"labels": labels, "dim": int(raw.shape[1])})
    print(f"imported {len(labels)} labels x {raw.shape[1]} dims")


def cmd_replay(args, argv) -> None:
    manifest = json.loads(Path(args.manifest).read_text(encoding="utf-8"))
    old = manifest["argv"]
    new = _replace_out(old, args.out)
    code = main(new)
    if code != 0:
        raise ValueError(f"replay of {manifest['command']} exited with {code}")
    fresh = json.loads((Path(args.out) / "manifest.json").read_text(encoding="utf-8"))
    diff = sorted(k for k in manifest["outputs"] if fresh["outputs"].get(k) != manifest["outputs"][k])
    if diff:
        raise ValueError(f"replay outputs differ from the manifest: {diff}")
    print(f"replayed {manifest['command']}: {len(fresh['outputs'])} outputs identical")


_OUT_FLAGS = ("--out", "--out-dir")


def _replace_out(argv: list[str], out: str) -> list[str]:
    res, i, hit = [], 0, False
    while i < len(argv):
        a = argv[i]
        if a in _OUT_FLAGS and i + 1 < len(argv):
            res += [a, out]
            i, hit = i + 2, True
            continue
        if any(a.startswith(f + "=") for f in _OUT_FLAGS):
            res.append(a.split("=", 1)[0] + "=" + out)
            hit = True
        else:
            res.append(a)
        i += 1
    if not hit:
        raise ValueError("manifest argv has no output flag")
    return res


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="decode", description="Guided diffusion forecasting of event-related multichannel signals.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="key = value config file")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="config override, repeatable")

    sp = sub.add_parser("synth", help="generate a synthetic trial set")
    common(sp)
    sp.add_argument("--preset")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--n-trials", type=int)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_synth)

    sp = sub.add_parser("prep", help="preprocess trials and tabulate neural responses")
    common(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_prep)

    sp = sub.add_parser("train", help="train denoiser and semantic bridge")
    common(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--embeddings")
    sp.add_argument("--out", required=True)
    sp.add_argument("--resume", help="checkpoint to continue; its stored configs are used")
    sp.add_argument("--epochs", type=int, help="epoch ceiling (overrides train.epochs, also on resume)")
    sp.set_defaults(fn=cmd_train)

    def guided(sp):
        sp.add_argument("--checkpoint", required=True)
        sp.add_argument("--horizon", type=int)
        sp.add_argument("--samples", type=int)
        sp.add_argument("--seed", type=int)
        sp.add_argument("--lambda-h", type=float)
        sp.add_argument("--lambda-t", type=float)
        sp.add_argument("--k-max", type=int)
        sp.add_argument("--out-dir", required=True)

    sp = sub.add_parser("forecast", help="sample a guided forecast ensemble")
    common(sp)
    guided(sp)
    sp.add_argument("--history-file", required=True)
    sp.add_argument("--event")
    sp.set_defaults(fn=cmd_forecast)

    sp = sub.add_parser("eval", help="score guidance variants on held-out trials")
    common(sp)
    guided(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--window-start", type=int, default=0)
    sp.add_argument("--variants", default="history,dual")
    sp.add_argument("--max-tasks", type=int, default=0)
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("embed-import", help="validate and import label text embeddings")
    sp.add_argument("--input", required=True, help="JSON {label: [floats]} or CSV label,v1,v2,...")
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_embed_import)

    sp = sub.add_parser("replay", help="rerun a manifest into a new directory and compare outputs")
    sp.add_argument("manifest")
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_replay)
    return p


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    if _THREADS is not None and not (_THREADS.strip().isdigit() and int(_THREADS) > 0):
        print(f"decode: DECODE_THREADS must be a positive integer, got {_THREADS!r}", file=sys.stderr)
        return 2
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.fn(args, argv)
    except DOMAIN_ERRORS as e:
        msg = e.args[0] if isinstance(e, KeyError) and e.args else str(e)
        print(f"decode {args.command}: error: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
