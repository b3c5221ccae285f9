"""Experiment configuration: strict JSON schema with per-field error paths."""

from __future__ import annotations

import dataclasses
import json
import math
import typing
from dataclasses import dataclass, field
from pathlib import Path

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


@dataclass
class AugmentConfig:
    horizontal_flip_prob: float = 0.0
    max_rotation_degrees: float = 0.0
    pad_and_crop: int = 0


@dataclass
class DatasetConfig:
    kind: str = "synthetic"  # "synthetic" or "file"
    num_classes: int = 5
    dims: int = 16
    rho: float = 100.0
    n_max: int = 2000
    separation: float = 3.0
    val_per_class: int = 50
    test_per_class: int = 200
    data_seed: int | None = None  # defaults to the experiment seed
    train: str | None = None
    val: str | None = None
    test: str | None = None
    split_seed: int = 0
    majority_size: int | None = None
    minority_size: int | None = None
    augment: AugmentConfig = field(default_factory=AugmentConfig)


@dataclass
class ModelConfig:
    extractor: str = "auto"  # "auto", "mlp" or "tiny_cnn"
    hidden: list[int] = field(default_factory=lambda: [64])
    channels: list[int] = field(default_factory=lambda: [8, 16])
    kernel_size: int = 3
    feature_dim: int = 32
    projection_dim: int = 16


@dataclass
class Stage1Config:
    epochs: int = 30
    warmup_epochs: int = 5
    peak_lr: float = 0.05
    min_lr: float = 1e-6
    momentum: float = 0.9
    weight_decay: float = 0.0005
    batch_size: int = 32
    lam: float | None = None  # None: 0.001 for center/triplet, 1.0 for supcon
    margin: float = 50.0
    mining: str = "batch_hard"
    temperature: float = 0.05


@dataclass
class Stage2Config:
    epochs: int = 10
    warmup_epochs: int = 0
    peak_lr: float = 0.1
    min_lr: float = 1e-6
    momentum: float = 0.9
    weight_decay: float = 0.0005
    batch_size: int = 32
    reinit_head: bool = False


@dataclass
class RebalanceConfig:
    weight_scheme: str = "inverse"  # used by RW, DRW and cRW
    beta: float = 0.9999
    drw_switch_fraction: float = 0.8
    mixup_alpha: float = 0.2
    focal_gamma: float = 2.0
    ldam_max_margin: float = 0.5
    ldam_scale: float = 30.0


@dataclass
class ExperimentConfig:
    schema_version: int = SCHEMA_VERSION
    method: str = "CE+SC->cRW"
    seed: int = 0
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    stage1: Stage1Config = field(default_factory=Stage1Config)
    stage2: Stage2Config = field(default_factory=Stage2Config)
    rebalance: RebalanceConfig = field(default_factory=RebalanceConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def replace(self, **changes) -> "ExperimentConfig":
        return from_dict(_merge(self.to_dict(), changes))


def _merge(base: dict, changes: dict) -> dict:
    out = dict(base)
    for k, v in changes.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _coerce(value, tp, path: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin is typing.Union or (origin is not None and type(None) in args):
        if value is None:
            if type(None) in args:
                return None
            raise ConfigError(path, "must not be null")
        inner = [a for a in args if a is not type(None)]
        return _coerce(value, inner[0], path)
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(path, "expected an object")
        return _build(tp, value, path)
    if origin is list:
        if not isinstance(value, list):
            raise ConfigError(path, "expected a list")
        return [_coerce(v, args[0], f"{path}[{i}]") for i, v in enumerate(value)]
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(path, "expected true/false")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, "expected an integer")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, "expected a number")
        if not math.isfinite(value):
            raise ConfigError(path, "must be finite")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(path, "expected a string")
        return value
    raise ConfigError(path, f"unsupported field type {tp}")


def _build(cls, data: dict, path: str):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{path}.{unknown[0]}" if path else unknown[0], "unknown field")
    kwargs = {k: _coerce(v, hints[k], f"{path}.{k}" if path else k) for k, v in data.items()}
    return cls(**kwargs)


def _check(cond: bool, path: str, message: str) -> None:
    if not cond:
        raise ConfigError(path, message)


def validate(cfg: ExperimentConfig) -> ExperimentConfig:
    from .trainer import parse_method  # deferred: trainer imports this module

    _check(cfg.schema_version == SCHEMA_VERSION, "schema_version", f"unsupported version (expected {SCHEMA_VERSION})")
    try:
        parse_method(cfg.method)
    except ValueError as exc:
        raise ConfigError("method", str(exc)) from None
    d = cfg.dataset
    _check(d.kind in ("synthetic", "file"), "dataset.kind", "expected 'synthetic' or 'file'")
    if d.kind == "file":
        _check(d.train is not None, "dataset.train", "required when kind is 'file'")
    else:
        _check(d.num_classes >= 2, "dataset.num_classes", "need at least 2 classes")
        _check(d.dims >= 1, "dataset.dims", "must be positive")
        _check(d.rho >= 1, "dataset.rho", "must be >= 1")
        _check(d.n_max >= 1, "dataset.n_max", "must be positive")
        _check(d.separation > 0, "dataset.separation", "must be positive")
        _check(d.val_per_class >= 1, "dataset.val_per_class", "must be positive")
        _check(d.test_per_class >= 1, "dataset.test_per_class", "must be positive")
    _check(0 <= d.augment.horizontal_flip_prob <= 1, "dataset.augment.horizontal_flip_prob", "must lie in [0, 1]")
    _check(d.augment.max_rotation_degrees >= 0, "dataset.augment.max_rotation_degrees", "must be >= 0")
    _check(d.augment.pad_and_crop >= 0, "dataset.augment.pad_and_crop", "must be >= 0")
    m = cfg.model
    _check(m.extractor in ("auto", "mlp", "tiny_cnn"), "model.extractor", "expected auto, mlp or tiny_cnn")
    _check(m.feature_dim >= 1, "model.feature_dim", "must be positive")
    _check(m.projection_dim >= 1, "model.projection_dim", "must be positive")
    _check(all(h >= 1 for h in m.hidden), "model.hidden", "widths must be positive")
    _check(all(c >= 1 for c in m.channels), "model.channels", "widths must be positive")
    for name in ("stage1", "stage2"):
        s = getattr(cfg, name)
        _check(s.epochs >= 0, f"{name}.epochs", "must be >= 0")
        _check(s.warmup_epochs >= 0 and (s.epochs == 0 or s.warmup_epochs < s.epochs),
               f"{name}.warmup_epochs", "must satisfy 0 <= warmup_epochs < epochs")
        _check(s.peak_lr > 0, f"{name}.peak_lr", "must be positive")
        _check(0 <= s.min_lr <= s.peak_lr, f"{name}.min_lr", "must satisfy 0 <= min_lr <= peak_lr")
        _check(0 <= s.momentum < 1, f"{name}.momentum", "must lie in [0, 1)")
        _check(s.weight_decay >= 0, f"{name}.weight_decay", "must be >= 0")
        _check(s.batch_size >= 2, f"{name}.batch_size", "must be >= 2")
    s1 = cfg.stage1
    _check(s1.lam is None or s1.lam >= 0, "stage1.lam", "must be >= 0")
    _check(s1.margin > 0, "stage1.margin", "must be positive")
    _check(s1.mining in ("batch_hard", "all_valid"), "stage1.mining", "expected batch_hard or all_valid")
    _check(s1.temperature > 0, "stage1.temperature", "must be positive")
    r = cfg.rebalance
    _check(r.weight_scheme in ("inverse", "effective"), "rebalance.weight_scheme", "expected inverse or effective")
    _check(0 <= r.beta < 1, "rebalance.beta", "must lie in [0, 1)")
    _check(0 <= r.drw_switch_fraction <= 1, "rebalance.drw_switch_fraction", "must lie in [0, 1]")
    _check(r.mixup_alpha > 0, "rebalance.mixup_alpha", "must be positive")
    _check(r.focal_gamma >= 0, "rebalance.focal_gamma", "must be >= 0")
    _check(r.ldam_max_margin >= 0, "rebalance.ldam_max_margin", "must be >= 0")
    _check(r.ldam_scale > 0, "rebalance.ldam_scale", "must be positive")
    return cfg


def from_dict(data: dict) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError("", "config must be a JSON object")
    return validate(_build(ExperimentConfig, data, ""))


def load_config(path) -> ExperimentConfig:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError("", f"invalid JSON: {exc}") from None
    return from_dict(data)
