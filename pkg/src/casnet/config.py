"""Training configuration and the flat ``key=value`` config file format."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .losses import LossWeights


class ConfigError(ValueError):
    """Malformed or unknown configuration entry."""


@dataclass
class TrainConfig:
    epochs: int = 500
    lambda_i: float = 2.0
    lambda_i_late: float = 1.0
    lambda_l: float = 1.0
    lambda_l_late: float = 2.0
    lambda_g: float = 200.0
    lambda_d: float = 500.0
    lambda_m: float = 200.0
    switch_epoch: int = 200
    T: int = 6
    grid: int = 64
    classes: int = 10
    groups: int = 4
    age_min: float = 20.6
    age_max: float = 38.2
    lr_field: float = 1e-2
    lr_group: float = 1e-2
    lr_ss: float = 1e-1
    lr_merge: float = 1e-1
    batch_size: int = 0
    seed: int = 0
    checkpoint_every: int = 0
    test_steps: int = 100
    test_lr: float = 1e-2
    reg_units: str = "normalized"
    data_dir: str = "data"
    out_dir: str = "run"

    def __post_init__(self):
        for f in fields(self):
            value = getattr(self, f.name)
            try:
                setattr(self, f.name, _coerce(f.type, value))
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"{f.name}: cannot interpret {value!r} as {f.type}") from exc
        if self.epochs < 0 or self.batch_size < 0 or self.checkpoint_every < 0 or self.test_steps < 0:
            raise ConfigError("epochs, batch_size, checkpoint_every and test_steps must be >= 0")
        if not 0 <= self.T <= 16:
            raise ConfigError("T must lie in [0, 16]")
        if self.age_min >= self.age_max:
            raise ConfigError("age_min must be below age_max")
        try:
            self.loss_weights()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    @property
    def age_range(self) -> tuple[float, float]:
        return (self.age_min, self.age_max)

    def loss_weights(self) -> LossWeights:
        return LossWeights((self.lambda_i, self.lambda_i_late), (self.lambda_l, self.lambda_l_late),
                           self.lambda_g, self.lambda_d, self.lambda_m, self.switch_epoch)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        return "".join(f"{f.name}={getattr(self, f.name)}\n" for f in fields(self))

    @classmethod
    def from_text(cls, text: str, **overrides) -> "TrainConfig":
        return cls(**{**parse_key_values(text, {f.name for f in fields(cls)}), **overrides})

    @classmethod
    def load(cls, path, **overrides) -> "TrainConfig":
        return cls.from_text(Path(path).read_text(), **overrides)


def _coerce(kind, value):
    kind = kind if isinstance(kind, str) else kind.__name__
    if kind == "int":
        if isinstance(value, float) and not value.is_integer():
            raise ValueError(value)
        return int(value)
    if kind == "float":
        return float(value)
    return str(value)


def parse_key_values(text: str, allowed=None) -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if allowed is not None and key not in allowed:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        out[key] = value
    return out
