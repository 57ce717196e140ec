"""Run configuration: flat ``section.key = value`` text files.

Every key has a default (``defaults()``); files and ``--set`` overrides may
only name known keys. Values are coerced to the type of the default. The
effective configuration is rendered back with ``render()`` so a run directory
always holds the exact settings used.

Example::

    # desk-scale training
    diffusion.T_diff = 100
    model.h_dim = 32
    train.lr = 1e-3
    bridge.widths = 16, 32
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path

# (default, help) per key. Sections mirror the modules that consume them.
SCHEMA: dict[str, dict[str, tuple[object, str]]] = {
    "diffusion": {
        "T_diff": (500, "forward diffusion steps"),
        "s": (0.008, "cosine schedule offset"),
        "sample_steps": (0, "respaced reverse steps at sampling time; 0 = all T_diff"),
    },
    "model": {
        "n_enc": (3, "encoder blocks"),
        "n_dec": (2, "decoder blocks, one trend+seasonal pair each"),
        "h_dim": (96, "hidden width"),
        "n_heads": (4, "attention heads"),
        "poly_degree": (3, "trend polynomial degree"),
        "k_freq": (5, "Fourier terms kept per decoder block"),
        "pool": (4, "trend pooling width"),
        "mlp_ratio": (4, "MLP expansion factor"),
    },
    "bridge": {
        "d_emb": (64, "joint embedding width"),
        "tau": (0.07, "InfoNCE temperature"),
        "widths": ((32, 64), "signal encoder conv widths"),
        "kernel": (5, "signal encoder kernel"),
        "stride": (2, "signal encoder stride"),
    },
    "train": {
        "epochs": (12000, "epoch ceiling"),
        "batch_size": (32, "windows per step"),
        "lr": (1e-5, "Adam learning rate"),
        "ema_decay": (0.995, "EMA decay of shadow weights"),
        "w_diffusion": (1.0, "weight of the L1 diffusion loss"),
        "w_contrast": (0.1, "weight of the InfoNCE loss"),
        "T_win": (1075, "window length"),
        "stride": (64, "window stride"),
        "horizon": (75, "forecast horizon h"),
        "seed": (0, "root seed"),
        "checkpoint_every": (0, "epochs between checkpoints; 0 = end only"),
        "dtype": ("float32", "float32 or float64"),
        "max_seconds": (0.0, "wall-clock budget; 0 = none"),
    },
    "guidance": {
        "eta_h": (0.05, "Langevin step size"),
        "alpha_w": (1.0, "weight of the history reconstruction term"),
        "gamma_w": (0.1, "weight of the fluency term"),
        "lambda_h": (1.0, "history guidance scale"),
        "lambda_t": (0.3, "text guidance scale"),
        "K_max": (5, "Langevin iterations at t = T_diff"),
        "n_samples": (8, "ensemble size"),
        "seed": (0, "sampling seed"),
        "text_mode": ("denoised", "denoised or noisy"),
    },
    "prep": {
        "reject_uv": (100.0, "peak-to-peak rejection threshold (uV)"),
        "lo_hz": (0.1, "bandpass low edge"),
        "hi_hz": (30.0, "bandpass high edge"),
        "baseline_ms": (500.0, "pre-stimulus baseline length"),
    },
    "synth": {
        "preset": ("desk2", "generator preset"),
        "n_trials": (0, "trials per event; 0 = preset value"),
        "seed": (0, "generator seed"),
    },
}


class ConfigError(ValueError):
    pass


@dataclass
class Config:
    values: dict[str, dict[str, object]] = field(default_factory=lambda: defaults().values)

    def __getitem__(self, dotted: str):
        section, key = _split(dotted)
        return self.values[section][key]

    def section(self, name: str) -> dict:
        if name not in self.values:
            raise ConfigError(f"unknown config section {name!r}")
        return dict(self.values[name])

    def set(self, dotted: str, raw) -> None:
        section, key = _split(dotted)
        default = SCHEMA[section][key][0]
        self.values[section][key] = coerce(raw, default, dotted) if isinstance(raw, str) else raw

    def render(self) -> str:
        lines = []
        for section, keys in SCHEMA.items():
            lines.append(f"# {section}")
            for key, (_, doc) in keys.items():
                lines.append(f"{section}.{key} = {format_value(self.values[section][key])}  # {doc}")
            lines.append("")
        return "\n".join(lines)

    def to_dict(self) -> dict:
        return {s: {k: (list(v) if isinstance(v, tuple) else v) for k, v in kv.items()}
                for s, kv in self.values.items()}


def defaults() -> Config:
    return Config({s: {k: v[0] for k, v in keys.items()} for s, keys in SCHEMA.items()})


def _split(dotted: str) -> tuple[str, str]:
    if "." not in dotted:
        raise ConfigError(f"config key {dotted!r} must be section.key")
    section, key = dotted.split(".", 1)
    if section not in SCHEMA:
        raise ConfigError(f"unknown config section {section!r}; known: {', '.join(SCHEMA)}")
    if key not in SCHEMA[section]:
        raise ConfigError(f"unknown config key {dotted!r}; known in {section}: {', '.join(SCHEMA[section])}")
    return section, key


def coerce(raw: str, default, name: str = "value"):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(int(p) for p in raw.replace("(", "").replace(")", "").split(",") if p.strip())
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r} as {type(default).__name__}") from None
    return raw


def format_value(v) -> str:
    if isinstance(v, tuple):
        return ", ".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def parse(text: str, base: Config | None = None, source: str = "<config>") -> Config:
    cfg = base or defaults()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'section.key = value'")
        key, value = (p.strip() for p in line.split("=", 1))
        try:
            cfg.set(key, value)
        except ConfigError as e:
            raise ConfigError(f"{source}:{lineno}: {e}") from None
    return cfg


def load(path=None, overrides: list[str] | None = None) -> Config:
    cfg = defaults()
    if path is not None:
        cfg = parse(Path(path).read_text(encoding="utf-8"), cfg, str(path))
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must be section.key=value")
        key, value = item.split("=", 1)
        cfg.set(key.strip(), value)
    return cfg


def build(cfg: Config, d: int):
    """Typed module configs from a Config: (DenoiserConfig, BridgeConfig, TrainConfig, GuidanceConfig, PrepConfig)."""
    from .denoiser import DenoiserConfig
    from .prep import PrepConfig
    from .sampler import GuidanceConfig
    from .trainer import BridgeConfig, TrainConfig

    def pick(cls, section, drop=()):
        names = {f.name for f in fields(cls)}
        return {k: v for k, v in cfg.section(section).items() if k in names and k not in drop}

    try:
        model = DenoiserConfig(d=d, **pick(DenoiserConfig, "model"))
        bridge = BridgeConfig(**pick(BridgeConfig, "bridge"))
        train = TrainConfig(**pick(TrainConfig, "train"))
        guide = GuidanceConfig(**pick(GuidanceConfig, "guidance"))
        prep = PrepConfig(**pick(PrepConfig, "prep"))
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from None
    return model, bridge, train, guide, prep
