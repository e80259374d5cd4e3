"""Run configuration: flat key = value files with documented defaults."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigError


@dataclass
class RunConfig:
    seed: int = 0
    max_iterations: int = 4000
    batch_size: int = 8
    lr: float = 6e-5
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lambda_g: float = 10.0
    lambda_ill: float = 1.0
    w_dis: float = 1.0
    w_ret: float = 1.0
    w_smooth: float = 1.0
    w_sede: float = 1.0
    preset: str = "base"
    feat_channels: int = 32
    k_classes: int = 6
    crop_h: int = 64
    crop_w: int = 128
    aug_scale_min: float = 1.0
    aug_scale_max: float = 1.0
    flip_prob: float = 0.5
    noise_smooth_cell: int = 32
    ignore_index: int = 255
    log_every: int = 50
    checkpoint_every: int = 2000
    data_dir: str = ""
    out_dir: str = ""

    def __post_init__(self):
        checks = [
            (self.max_iterations > 0, "max_iterations must be positive"),
            (self.batch_size > 0 and self.batch_size % 2 == 0,
             "batch_size must be positive and even (samples are paired)"),
            (self.lr > 0, "lr must be positive"),
            (self.weight_decay >= 0, "weight_decay must be >= 0"),
            (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1, "betas must lie in [0,1)"),
            (self.lambda_g > 0, "lambda_g must be positive"),
            (self.lambda_ill >= 0, "lambda_ill must be >= 0"),
            (min(self.w_dis, self.w_ret, self.w_smooth, self.w_sede) >= 0,
             "loss weights must be >= 0"),
            (self.k_classes >= 1, "k_classes must be >= 1"),
            (self.crop_h >= 8 and self.crop_w >= 8, "crop size must be at least 8x8"),
            (0 < self.aug_scale_min <= self.aug_scale_max, "invalid augmentation scale range"),
            (0 <= self.flip_prob <= 1, "flip_prob must lie in [0,1]"),
            (0 <= self.ignore_index <= 255, "ignore_index must fit in a byte"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(RunConfig)}


def _coerce(key: str, raw: str, line_no: int):
    target = _FIELD_TYPES[key]
    try:
        if target == "int":
            return int(raw)
        if target == "float":
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"line {line_no}: cannot parse {key} = {raw!r}") from None


def parse_config(text: str) -> RunConfig:
    """Parse `key = value` lines; '#' starts a comment; unknown keys fail."""
    values: dict = {}
    for line_no, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {line_no}: expected 'key = value', got {stripped!r}")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        raw = raw.strip()
        if key not in _FIELD_TYPES:
            raise ConfigError(f"line {line_no}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {line_no}: duplicate key {key!r}")
        values[key] = _coerce(key, raw, line_no)
    return RunConfig(**values)


def load_config(path: Path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text)
