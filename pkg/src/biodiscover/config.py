"""Run configuration: YAML file, then ``BIODISCOVER_*`` environment variables, then flags."""

from __future__ import annotations

import math
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping

import yaml

from .classify import TrainSchedule
from .core import CameraSettings, ConfigError

ENV_PREFIX = "BIODISCOVER_"


@dataclass
class RunConfig:
    data_root: str = "data"
    output_dir: str = "out"
    exposure_us: int = 2000
    aperture_f: float = 8.0
    seed: int = 0
    fractions: list[float] = field(default_factory=lambda: [0.7, 0.1, 0.2])
    n_reps: int = 10
    rule: str = "majority"
    trigger_threshold: int = 50
    tolerance_k: float = 4.0
    tolerance_floor: float = 8.0
    learning_rates: list[float] = field(default_factory=lambda: [1e-3, 1e-4, 1e-5, 1e-6])
    epochs_per_rate: int = 50
    batch_size: int = 128
    nmax: list[float] = field(default_factory=lambda: [1, 2, 5, 10, 20, 50, 100, math.inf])
    outlier_sigma: float = 3.0
    area_scale: float = 1.0
    bias_correction: bool = False
    preset: str = "separable"
    specimens_per_species: int = 20
    sink_time_s: float = 0.5
    compact_sensor: bool = True
    jobs: int = 1

    @property
    def settings(self) -> CameraSettings:
        return CameraSettings(int(self.exposure_us), float(self.aperture_f))

    @property
    def schedule(self) -> TrainSchedule:
        return TrainSchedule(tuple(self.learning_rates), self.epochs_per_rate, self.batch_size)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["nmax"] = ["inf" if math.isinf(v) else v for v in self.nmax]
        return d


FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(name: str, value: Any) -> Any:
    kind = FIELD_TYPES[name]
    if kind == "list[float]":
        if isinstance(value, str):
            value = [v for v in value.replace(",", " ").split()]
        if not isinstance(value, (list, tuple)):
            raise ValueError("expected a list of numbers")
        return [float(v) for v in value]
    if kind == "int":
        if isinstance(value, bool) or float(value) != int(float(value)):
            raise ValueError("expected an integer")
        return int(float(value))
    if kind == "float":
        return float(value)
    if kind == "bool":
        if isinstance(value, str):
            if value.lower() in ("1", "true", "yes", "on"):
                return True
            if value.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError("expected a boolean")
        return bool(value)
    return str(value)


def validate(cfg: RunConfig) -> list[str]:
    errors = []
    if len(cfg.fractions) != 3 or any(f < 0 for f in cfg.fractions):
        errors.append("fractions: need three non-negative values (train, val, test)")
    elif abs(sum(cfg.fractions) - 1.0) > 1e-9:
        errors.append(f"fractions: must sum to 1, got {sum(cfg.fractions):.6g}")
    if cfg.n_reps < 1:
        errors.append("n_reps: must be at least 1")
    if cfg.rule not in ("majority", "weighted"):
        errors.append(f"rule: must be 'majority' or 'weighted', got {cfg.rule!r}")
    try:
        cfg.settings
    except (ValueError, ConfigError) as exc:
        errors.append(f"exposure_us/aperture_f: {exc}")
    try:
        cfg.schedule
    except ValueError as exc:
        errors.append(f"learning_rates/epochs_per_rate/batch_size: {exc}")
    if cfg.trigger_threshold < 1:
        errors.append("trigger_threshold: must be positive")
    if any(not n > 0 for n in cfg.nmax):
        errors.append("nmax: values must be positive")
    if cfg.outlier_sigma <= 0:
        errors.append("outlier_sigma: must be positive")
    if cfg.area_scale <= 0:
        errors.append("area_scale: must be positive")
    if not cfg.sink_time_s > 0:
        errors.append("sink_time_s: must be positive")
    if cfg.specimens_per_species < 1:
        errors.append("specimens_per_species: must be at least 1")
    if cfg.jobs == 0 or cfg.jobs < -1:
        errors.append("jobs: must be positive or -1")
    return errors


def load_config(path: Path | None = None, env: Mapping[str, str] | None = None, overrides: Mapping[str, Any] | None = None) -> RunConfig:
    """Merge file values, environment overrides and flag overrides, then validate."""
    values: dict[str, Any] = {}
    problems = []
    if path is not None:
        try:
            doc = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError(f"config {path} must be a mapping")
        unknown = sorted(set(doc) - set(FIELD_TYPES))
        problems += [f"{k}: unknown field" for k in unknown]
        values.update({k: v for k, v in doc.items() if k in FIELD_TYPES})
    env = os.environ if env is None else env
    for name in FIELD_TYPES:
        key = ENV_PREFIX + name.upper()
        if key in env:
            values[name] = env[key]
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})

    coerced = {}
    for name, value in values.items():
        try:
            coerced[name] = _coerce(name, value)
        except (TypeError, ValueError) as exc:
            problems.append(f"{name}: {exc} (got {value!r})")
    cfg = RunConfig(**coerced)
    problems += validate(cfg)
    if problems:
        raise ConfigError("invalid configuration", problems)
    return cfg
