"""Flat run configuration: built-in defaults < JSON file < command-line overrides."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Iterable, Mapping

from .backbone import BackboneConfig
from .training import TrainConfig, desk_train_config

CONFIG_SCHEMA = 1

_TRAIN_DEFAULTS = desk_train_config()

DEFAULTS: dict = {
    # model
    "plan": "none",
    "r": 16,
    "stage_depths": [3, 4, 6, 3],
    "base_width": 64,
    "width_divisor": 8,
    "last_stride": 1,
    "input_hw": [64, 32],
    "dtype": "float32",
    # data
    "data": "synthetic",
    "manifest": None,
    "n_train_ids": 50,
    "n_test_ids": 64,
    "imgs_per_id": 20,
    "n_cams": 3,
    "data_seed": 7,
    "domain": "source",
    "mean": [0.5, 0.5, 0.5],
    "std": [0.5, 0.5, 0.5],
    # training
    **{k: (list(v) if isinstance(v, tuple) else v) for k, v in _TRAIN_DEFAULTS.to_dict().items() if k != "seed"},
    "seeds": 1,
    "checkpoint": None,
    # evaluation
    "metric": "cosine",
    "protocol": "standard",
    # bench
    "deep": False,
    "batch_size": 16,
    "warmup": 50,
    "iters": 500,
    "timing": "measured",
    # search
    "kinds": ["se", "hac", "nl", "cnl"],
    "positions": [],
    "max_blocks": 3,
    "search_seeds": 3,
    "budget": None,
    "lr_grid": [],
    "workers": 1,
    "mixed": False,
    # global
    "seed": 0,
    "threads": 1,
    "out": "out",
}

_CHOICES = {
    "dtype": ("float32", "float64"),
    "domain": ("source", "target"),
    "metric": ("cosine", "euclidean"),
    "protocol": ("standard", "roreas-shape"),
    "timing": ("measured", "modeled"),
}


# element type of list keys and value type of keys whose default is None
_TYPES = {"positions": int, "lr_grid": float, "budget": int, "manifest": str, "checkpoint": str}


class ConfigError(ValueError):
    pass


def _coerce(key: str, value):
    if key not in DEFAULTS:
        raise ConfigError(f"unknown config key {key!r}")
    default = DEFAULTS[key]
    if value is None:
        return None
    try:
        if isinstance(default, bool):
            if isinstance(value, str):
                if value.lower() not in ("true", "false", "1", "0", "yes", "no"):
                    raise ValueError(value)
                return value.lower() in ("true", "1", "yes")
            return bool(value)
        if isinstance(default, int):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(value)
        if isinstance(default, float):
            return float(value)
        if isinstance(default, list):
            if isinstance(value, str):
                value = [v for v in value.split(",") if v]
            if not isinstance(value, (list, tuple)):
                raise ValueError(value)
            kind = _TYPES.get(key) or type(default[0])
            return [kind(v) for v in value]
        if default is None:
            return _TYPES[key](value)
        return str(value)
    except (TypeError, ValueError):
        raise ConfigError(f"bad value for {key!r}: {value!r}") from None


def _check(cfg: dict) -> dict:
    for key, choices in _CHOICES.items():
        if cfg[key] not in choices:
            raise ConfigError(f"{key} must be one of {choices}, got {cfg[key]!r}")
    return cfg


def load_file(path) -> dict:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc.msg} at line {exc.lineno})") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be an object")
    raw.pop("schema", None)
    return {k: _coerce(k, v) for k, v in raw.items()}


def parse_override(item: str) -> tuple:
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not key=value")
    key, text = item.split("=", 1)
    key = key.strip().replace("-", "_")
    try:
        value = json.loads(text)
    except json.JSONDecodeError:
        value = text
    return key, _coerce(key, value)


def resolve(path=None, overrides: Mapping | None = None, set_items: Iterable[str] = ()) -> dict:
    """Merge the three layers; the later layer wins key by key."""
    cfg = dict(DEFAULTS)
    if path is not None:
        cfg.update(load_file(path))
    for item in set_items:
        k, v = parse_override(item)
        cfg[k] = v
    for k, v in (overrides or {}).items():
        if v is not None:
            cfg[k] = _coerce(k, v)
    return _check(cfg)


def dump(cfg: Mapping) -> str:
    return json.dumps({"schema": CONFIG_SCHEMA, **cfg}, sort_keys=True, indent=2)


def backbone_config(cfg: Mapping, num_classes: int) -> BackboneConfig:
    return BackboneConfig(stage_depths=tuple(cfg["stage_depths"]), base_width=cfg["base_width"],
                          width_divisor=cfg["width_divisor"], last_stride=cfg["last_stride"],
                          input_hw=tuple(cfg["input_hw"]), num_classes=num_classes)


def train_config(cfg: Mapping, seed: int | None = None) -> TrainConfig:
    fields = TrainConfig.__dataclass_fields__
    kw = {k: (tuple(v) if isinstance(v, list) else v) for k, v in cfg.items() if k in fields and k != "seed"}
    return TrainConfig(seed=cfg["seed"] if seed is None else seed, **kw)
