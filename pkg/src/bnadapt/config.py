"""Run configuration: a single JSON document per experiment.

Parsing is strict (unknown keys are rejected with the offending path) and
every field has a default, so an empty document is a valid config. CLI flags
override individual fields after parsing.

Defaults define the standard synthetic benchmark: 3 classes in 2-d, 200
points per class split 50/50 into train/test per domain, cluster spread 0.35
on a ring of radius 2, and a target shift of 50 degrees rotation, scale
(1.2, 0.8), translation (1.5, -0.5), noise 0.05.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

from .errors import ConfigError

LAMBDA_GRID_DEFAULT = (0.01, 0.1, 0.2, 1.0, 10.0, 50.0, 100.0)
FRACTION_GRID_DEFAULT = (0.05, 0.1, 0.25, 0.5, 1.0)


@dataclass
class ShiftSettings:
    angle_deg: float = 50.0
    translation: list = field(default_factory=lambda: [1.5, -0.5])
    scale: list = field(default_factory=lambda: [1.2, 0.8])
    noise_std: float = 0.05


@dataclass
class DataSettings:
    kind: str = "blobs"  # "blobs" or "csv"
    seed: int = 0
    classes: int = 3
    dim: int = 2
    n_per_class: int = 200
    spread: float = 0.35
    ring_radius: float = 2.0
    train_fraction: float = 0.5
    shift: ShiftSettings = field(default_factory=ShiftSettings)
    source_train_csv: str | None = None
    source_test_csv: str | None = None
    target_train_csv: str | None = None
    target_test_csv: str | None = None


@dataclass
class ModelSettings:
    hidden: list = field(default_factory=lambda: [16, 16])
    bn_width: int = 1


@dataclass
class PretrainSettings:
    iterations: int = 800
    batch_size: int = 64
    learning_rate: float = 1e-3
    label_smoothing: float = 0.1
    log_interval: int = 50


@dataclass
class AdaptSettings:
    lam: float = 10.0  # JSON key: "lambda"
    iterations: int = 3000
    batch_size: int = 64
    learning_rate: float = 1e-4
    log_interval: int = 50
    bn_frozen_mode: str = "stored"
    target_fraction: float = 1.0
    checkpoint: str | None = None


@dataclass
class SweepSettings:
    lambda_grid: list = field(default_factory=lambda: list(LAMBDA_GRID_DEFAULT))
    fraction_grid: list = field(default_factory=lambda: list(FRACTION_GRID_DEFAULT))


@dataclass
class RunConfig:
    seed: int = 0
    seeds: list | None = None
    out_dir: str | None = None
    deterministic_timing: bool = True
    jobs: int = 1
    data: DataSettings = field(default_factory=DataSettings)
    model: ModelSettings = field(default_factory=ModelSettings)
    pretrain: PretrainSettings = field(default_factory=PretrainSettings)
    adapt: AdaptSettings = field(default_factory=AdaptSettings)
    sweep: SweepSettings = field(default_factory=SweepSettings)

    def resolved_seeds(self) -> list:
        return list(self.seeds) if self.seeds else [self.seed]


# JSON key -> dataclass field renames (JSON uses the plain hyperparameter name).
_RENAMES = {"lambda": "lam"}

_SECTIONS = {
    (RunConfig, "data"): DataSettings,
    (RunConfig, "model"): ModelSettings,
    (RunConfig, "pretrain"): PretrainSettings,
    (RunConfig, "adapt"): AdaptSettings,
    (RunConfig, "sweep"): SweepSettings,
    (DataSettings, "shift"): ShiftSettings,
}


def _build(cls, raw: dict, path: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"{path or 'config'}: expected an object")
    values = {}
    fields = cls.__dataclass_fields__
    for key, value in raw.items():
        name = _RENAMES.get(key, key)
        if name not in fields:
            where = f"{path}.{key}" if path else key
            raise ConfigError(f"unknown config key: {where}")
        sub = _SECTIONS.get((cls, name))
        if sub is not None:
            child = f"{path}.{key}" if path else key
            values[name] = _build(sub, value, child)
        else:
            values[name] = value
    return cls(**values)


def _require_number(value, path: str, *, integer: bool = False, minimum=None):
    ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    if integer:
        ok = isinstance(value, int) and not isinstance(value, bool)
    if not ok or (isinstance(value, float) and not math.isfinite(value)):
        kind = "an integer" if integer else "a number"
        raise ConfigError(f"{path}: expected {kind}")
    if minimum is not None and value < minimum:
        raise ConfigError(f"{path}: must be >= {minimum}, got {value}")


def _validate(cfg: RunConfig) -> RunConfig:
    _require_number(cfg.seed, "seed", integer=True, minimum=0)
    if cfg.seeds is not None:
        if not isinstance(cfg.seeds, list) or not cfg.seeds:
            raise ConfigError("seeds: expected a non-empty list of integers")
        for i, s in enumerate(cfg.seeds):
            _require_number(s, f"seeds[{i}]", integer=True, minimum=0)
    _require_number(cfg.jobs, "jobs", integer=True, minimum=1)
    if cfg.data.kind not in ("blobs", "csv"):
        raise ConfigError(f"data.kind: expected 'blobs' or 'csv', got {cfg.data.kind!r}")
    _require_number(cfg.data.classes, "data.classes", integer=True, minimum=2)
    _require_number(cfg.data.dim, "data.dim", integer=True, minimum=2)
    _require_number(cfg.data.n_per_class, "data.n_per_class", integer=True, minimum=2)
    _require_number(cfg.data.spread, "data.spread", minimum=0.0)
    _require_number(cfg.data.ring_radius, "data.ring_radius", minimum=0.0)
    if not 0.0 < cfg.data.train_fraction < 1.0:
        raise ConfigError("data.train_fraction: must be in (0, 1)")
    for name in ("translation", "scale"):
        vec = getattr(cfg.data.shift, name)
        if not isinstance(vec, list) or len(vec) != cfg.data.dim:
            raise ConfigError(
                f"data.shift.{name}: expected a list of length data.dim"
            )
    _require_number(cfg.data.shift.angle_deg, "data.shift.angle_deg")
    for name in ("translation", "scale"):
        for i, v in enumerate(getattr(cfg.data.shift, name)):
            _require_number(v, f"data.shift.{name}[{i}]")
    _require_number(cfg.data.shift.noise_std, "data.shift.noise_std", minimum=0.0)
    if not isinstance(cfg.model.hidden, list) or not cfg.model.hidden:
        raise ConfigError("model.hidden: expected a non-empty list of layer sizes")
    for i, h in enumerate(cfg.model.hidden):
        _require_number(h, f"model.hidden[{i}]", integer=True, minimum=1)
    _require_number(cfg.model.bn_width, "model.bn_width", integer=True, minimum=1)
    _require_number(cfg.pretrain.iterations, "pretrain.iterations", integer=True, minimum=0)
    _require_number(cfg.pretrain.batch_size, "pretrain.batch_size", integer=True, minimum=1)
    _require_number(cfg.pretrain.learning_rate, "pretrain.learning_rate", minimum=0.0)
    if not 0.0 <= cfg.pretrain.label_smoothing < 1.0:
        raise ConfigError("pretrain.label_smoothing: must be in [0, 1)")
    _require_number(cfg.adapt.lam, "adapt.lambda", minimum=0.0)
    _require_number(cfg.adapt.iterations, "adapt.iterations", integer=True, minimum=0)
    _require_number(cfg.adapt.batch_size, "adapt.batch_size", integer=True, minimum=2)
    _require_number(cfg.adapt.learning_rate, "adapt.learning_rate", minimum=0.0)
    _require_number(cfg.adapt.log_interval, "adapt.log_interval", integer=True, minimum=1)
    if cfg.adapt.bn_frozen_mode not in ("stored", "batch"):
        raise ConfigError("adapt.bn_frozen_mode: expected 'stored' or 'batch'")
    if not 0.0 < cfg.adapt.target_fraction <= 1.0:
        raise ConfigError("adapt.target_fraction: must be in (0, 1]")
    if not cfg.sweep.lambda_grid:
        raise ConfigError("sweep.lambda_grid: must be non-empty")
    for i, lam in enumerate(cfg.sweep.lambda_grid):
        _require_number(lam, f"sweep.lambda_grid[{i}]", minimum=0.0)
    if not cfg.sweep.fraction_grid:
        raise ConfigError("sweep.fraction_grid: must be non-empty")
    for i, frac in enumerate(cfg.sweep.fraction_grid):
        _require_number(frac, f"sweep.fraction_grid[{i}]")
        if not 0.0 < frac <= 1.0:
            raise ConfigError(f"sweep.fraction_grid[{i}]: must be in (0, 1]")
    return cfg


def parse_config(raw: dict) -> RunConfig:
    """Build a RunConfig from a parsed JSON object, strictly."""
    return _validate(_build(RunConfig, raw, ""))


def load_config(path: str) -> RunConfig:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return parse_config(raw)
