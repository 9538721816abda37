"""Run configuration, presets and TOML round-tripping."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import tomli
import tomli_w

from .denoise import DensHyper
from .model import ModelConfig

MODES = ("direct", "gradient")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    data_dir: str = "data"
    mode: str = "direct"
    epochs: int = 30
    batch_size: int = 8
    eval_batch_size: int = 32
    lr_max: float = 2e-3
    warmup_frac: float = 0.1
    weight_decay: float = 1e-3
    clip_norm: float = 100.0
    ema_decay: float = 0.0          # 0 disables the EMA copy
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    log_wall_time: bool = False     # wall_sec column stays 0 so metrics.csv is reproducible
    model: ModelConfig = field(default_factory=ModelConfig)
    dens: DensHyper = field(default_factory=DensHyper)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        for name in ("epochs", "batch_size", "eval_batch_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        for name in ("lr_max", "clip_norm"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if not 0.0 <= self.warmup_frac < 1.0:
            raise ConfigError("warmup_frac must lie in [0, 1)")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ConfigError("ema_decay must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def with_dens(self, **kw) -> "TrainConfig":
        return replace(self, dens=replace(self.dens, **kw))


# Desk scale: tiny model, synthetic LJ data. DeNS values picked by short
# validation sweeps; a decaying weight keeps the auxiliary task from costing
# force accuracy late in training.
DESK = TrainConfig(dens=DensHyper(p_dens=0.25, lambda_dens=5.0, sigma=0.05, r_dens=0.25,
                                  lambda_schedule="linear-to-zero"))

# OC20-style (S2EF-2M base setting) and MD17-style (Equiformer L_max=2) training
# recipes; model shape stays desk-sized.
PRESETS: dict[str, dict] = {
    "desk": {},
    "oc20": {
        "epochs": 12, "batch_size": 64, "lr_max": 2e-4, "warmup_frac": 0.1 / 12,
        "weight_decay": 1e-3, "clip_norm": 100.0, "ema_decay": 0.999, "mode": "direct",
        "dens": {"p_dens": 0.5, "lambda_dens": 10.0, "sigma": 0.1, "r_dens": 0.5,
                 "lambda_e": 2.0, "lambda_f": 100.0, "lambda_schedule": "constant"},
    },
    "md17": {
        "epochs": 1500, "batch_size": 8, "lr_max": 5e-4, "mode": "gradient",
        "dens": {"p_dens": 0.25, "lambda_dens": 5.0, "sigma": 0.05, "r_dens": 0.25,
                 "lambda_e": 1.0, "lambda_f": 80.0, "lambda_schedule": "linear-to-zero"},
    },
}


def _build(cls, values: dict, where: str):
    known = {f.name: f for f in fields(cls)}
    kwargs = {}
    for key, val in values.items():
        if key not in known:
            raise ConfigError(f"unknown config key {where}{key!r}")
        kwargs[key] = val
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as err:
        raise ConfigError(f"{where or 'config'}: {err}") from err


def merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = merge(out[k], v)
        else:
            out[k] = v
    return out


def from_dict(d: dict) -> TrainConfig:
    d = dict(d)
    model = _build(ModelConfig, d.pop("model", {}) or {}, "model.")
    dens = _build(DensHyper, d.pop("dens", {}) or {}, "dens.")
    for key in d:
        if key not in {f.name for f in fields(TrainConfig)}:
            raise ConfigError(f"unknown config key {key!r}")
    try:
        return TrainConfig(**d, model=model, dens=dens)
    except TypeError as err:
        raise ConfigError(str(err)) from err


def preset(name: str) -> dict:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
    return PRESETS[name]


def resolve(path=None, preset_name: str | None = None, overrides: dict | None = None) -> TrainConfig:
    """defaults <- preset <- config file <- overrides (later wins)."""
    d = DESK.to_dict()
    if preset_name:
        d = merge(d, preset(preset_name))
    if path is not None:
        d = merge(d, load_toml(path))
    if overrides:
        d = merge(d, overrides)
    return from_dict(d)


def load_toml(path) -> dict:
    try:
        with open(path, "rb") as fh:
            return tomli.load(fh)
    except tomli.TOMLDecodeError as err:
        raise ConfigError(f"{path}: {err}") from err


def save_toml(cfg: TrainConfig, path) -> None:
    with open(Path(path), "wb") as fh:
        tomli_w.dump(cfg.to_dict(), fh)
