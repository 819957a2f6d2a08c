"""Flat run configuration and its ``key = value`` text format."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields

from .errors import ParameterError, ParseError
from .stgcn import FIXED_MODES

OPTIMIZERS = ("adam", "sgd")
FEATURE_NETS = ("full", "toy")


@dataclass(frozen=True)
class TrainConfig:
    """Every hyperparameter of a run; the seed fixes all random draws."""

    # optimisation
    optimizer: str = "adam"
    lr: float = 1e-3
    epochs: int = 50
    batch_size: int = 32
    window_block: int = 16
    patience: int = 10
    val_fraction: float = 0.1
    seed: int = 0
    # model
    d: int = 2
    K: int = 3
    layers: int = 1
    cheb_filters: int = 10
    time_filters: int = 10
    time_kernel: int = 3
    head_hidden: int = 0
    feature_net: str = "full"
    # graphs
    adjacency: str = "learned"
    layout: str = "auto"
    lam: float = 0.001
    knn_k: int = 2
    mi_bins: int = 16
    # losses
    beta: float = 0.1
    warmup: int = 10
    mu: float = 1e-4

    def __post_init__(self):
        positive = ("lr", "epochs", "batch_size", "window_block", "K", "layers", "cheb_filters",
                    "time_filters", "time_kernel", "knn_k", "mi_bins")
        for name in positive:
            if getattr(self, name) <= 0:
                raise ParameterError(f"{name} must be positive, got {getattr(self, name)}")
        non_negative = ("patience", "seed", "d", "head_hidden", "lam", "beta", "warmup", "mu")
        for name in non_negative:
            if getattr(self, name) < 0:
                raise ParameterError(f"{name} must be >= 0, got {getattr(self, name)}")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ParameterError(f"val_fraction must lie in [0, 1), got {self.val_fraction}")
        if self.optimizer not in OPTIMIZERS:
            raise ParameterError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if self.feature_net not in FEATURE_NETS:
            raise ParameterError(f"feature_net must be one of {FEATURE_NETS}, got {self.feature_net!r}")
        if self.adjacency not in ("learned",) + FIXED_MODES:
            raise ParameterError(f"unknown adjacency mode {self.adjacency!r}")

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


FIELD_TYPES = {f.name: f.type for f in fields(TrainConfig)}


def _convert(key: str, raw: str, line=None):
    kind = FIELD_TYPES[key]
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError:
        raise ParseError(f"{key} expects a {kind}, got {raw!r}", line) from None
    return raw


def parse_config_text(text: str) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment. Unknown keys are rejected."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(f"expected 'key = value', got {raw.strip()!r}", lineno)
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in FIELD_TYPES:
            raise ParseError(f"unknown key {key!r}", lineno)
        if key in values:
            raise ParseError(f"duplicate key {key!r}", lineno)
        values[key] = _convert(key, value, lineno)
    return values


def coerce_overrides(overrides: dict) -> dict:
    """Convert string overrides (e.g. from command-line flags) to field types."""
    out = {}
    for key, value in overrides.items():
        if key not in FIELD_TYPES:
            raise ParseError(f"unknown key {key!r}")
        out[key] = _convert(key, value) if isinstance(value, str) else value
    return out


def load_config(text: str = "", overrides: dict | None = None) -> TrainConfig:
    values = parse_config_text(text)
    values.update(coerce_overrides(overrides or {}))
    return TrainConfig(**values)


def format_config(config: TrainConfig) -> str:
    """Canonical text form; parsing it returns an equal config."""
    lines = []
    for f in fields(TrainConfig):
        value = getattr(config, f.name)
        lines.append(f"{f.name} = {value!r}\n" if isinstance(value, float) else f"{f.name} = {value}\n")
    return "".join(lines)
