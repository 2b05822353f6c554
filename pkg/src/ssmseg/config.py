"""Run configuration: a flat key=value file plus command-line overrides.

The file format is one `key = value` pair per line, `#` comments, blank
lines ignored. Keys use the descriptive names below; the historical short
spellings K, k_h, lambda, and lambda_i are accepted as aliases on input.
Parse errors carry the file name and line number.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Dict, Optional

VARIANT_CHOICES = ("rs-ssm", "v-ssm", "bi-v-ssm", "no-cwap")

ALIASES = {
    "K": "bands",
    "k_h": "high_bands",
    "lambda": "ce_weight",
    "lambda_i": "ci_weight",
}


class ConfigError(ValueError):
    """Bad configuration file or override."""


@dataclass
class RunConfig:
    # model
    variant: str = "rs-ssm"
    layers: int = 2
    embed_dim: int = 32
    state_dim: int = 4
    bands: int = 8          # radial frequency bands (alias: K)
    high_bands: int = 3     # top bands summed into the feature (alias: k_h)
    detach_spectrum: bool = False
    invert_axis: str = "channel"
    fgir_eps: float = 1e-8
    # loss
    ce_weight: float = 0.5  # alias: lambda
    ci_weight: float = 0.1  # alias: lambda_i
    # optimization
    steps: int = 2000
    lr: float = 2.5e-3
    weight_decay: float = 0.01
    batch_clips: int = 1
    # data
    img_size: int = 64
    frames: int = 4
    classes: int = 4
    shapes: int = 3
    train_clips: int = 200
    eval_clips: int = 50
    noise: float = 0.08
    data_seed: int = 7
    data_dir: str = ""
    ignore_index: int = 255
    streaming_eval: bool = False
    # run
    seed: int = 0
    precision: str = "f32"

    def validate(self) -> None:
        if self.variant not in VARIANT_CHOICES:
            raise ConfigError(f"variant must be one of {VARIANT_CHOICES}, "
                              f"got {self.variant!r}")
        if self.precision not in ("f32", "f64"):
            raise ConfigError(f"precision must be f32 or f64, got {self.precision!r}")
        if self.invert_axis not in ("channel", "state"):
            raise ConfigError(f"invert_axis must be channel or state, "
                              f"got {self.invert_axis!r}")
        for name in ("layers", "embed_dim", "state_dim", "frames", "shapes",
                     "train_clips", "eval_clips", "batch_clips"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.steps < 0:
            raise ConfigError("steps must be >= 0")
        if self.bands < 2:
            raise ConfigError("bands must be >= 2")
        if not 1 <= self.high_bands < self.bands:
            raise ConfigError(f"high_bands must be in [1, bands), got "
                              f"{self.high_bands} with bands={self.bands}")
        if not 2 <= self.classes <= 255:
            raise ConfigError("classes must be in [2, 255]")
        if self.img_size % 4:
            raise ConfigError("img_size must be divisible by the patch stride (4)")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.weight_decay < 0 or self.ce_weight < 0 or self.ci_weight < 0:
            raise ConfigError("weights must be nonnegative")
        if self.noise < 0:
            raise ConfigError("noise must be nonnegative")
        if self.fgir_eps <= 0:
            raise ConfigError("fgir_eps must be positive")


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}


def _convert(key: str, raw: str, where: str):
    kind = _FIELDS[key].type
    try:
        if kind == "bool" or isinstance(_FIELDS[key].default, bool):
            low = raw.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if isinstance(_FIELDS[key].default, int):
            return int(raw)
        if isinstance(_FIELDS[key].default, float):
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"{where}: bad value for {key!r}: {exc}") from None


def parse_config_text(text: str, source: str = "<config>") -> RunConfig:
    cfg = RunConfig()
    for line_no, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{line_no}: expected key = value, got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        key = ALIASES.get(key, key)
        if key not in _FIELDS:
            raise ConfigError(f"{source}:{line_no}: unknown key {key!r}")
        setattr(cfg, key, _convert(key, value, f"{source}:{line_no}"))
    cfg.validate()
    return cfg


def load_config(path: str) -> RunConfig:
    try:
        with open(path) as f:
            text = f.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path!r}: {exc}") from None
    return parse_config_text(text, source=path)


def apply_overrides(cfg: RunConfig, overrides: Dict[str, object]) -> RunConfig:
    """Command-line flags win over file values. None entries are ignored."""
    for key, value in overrides.items():
        if value is None:
            continue
        key = ALIASES.get(key, key)
        if key not in _FIELDS:
            raise ConfigError(f"unknown config field {key!r}")
        setattr(cfg, key, value)
    cfg.validate()
    return cfg


def serialize(cfg: RunConfig) -> str:
    lines = [f"{f.name} = {getattr(cfg, f.name)}" for f in dataclasses.fields(RunConfig)]
    return "\n".join(lines) + "\n"


def write_config(cfg: RunConfig, path: str) -> None:
    with open(path, "w") as f:
        f.write(serialize(cfg))
