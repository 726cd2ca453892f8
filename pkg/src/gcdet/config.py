"""Run configuration: YAML file + command-line overrides over built-in defaults.

Precedence is CLI flag > config file > default. Unknown keys anywhere in the
file are rejected so typos fail loudly instead of silently using defaults.
"""

import copy
from pathlib import Path

import yaml

from .errors import ConfigError

DEFAULTS = {
    "detector": {
        "size": "S",
        "gc_enabled": False,
        "gc_ratio": 8,
        "num_classes": 9,
        "reg_max": 16,
    },
    "train": {
        "epochs": 100,
        "batch_size": 16,
        "lr0": 0.01,
        "momentum": 0.937,
        "weight_decay": 0.0005,
        "warmup_epochs": 3.0,
        "image_size": 640,
        "clip_norm": 10.0,
        "augment": True,
        "seed": 0,
    },
    "eval": {
        "conf": 0.001,
        "nms_iou": 0.7,
    },
    "predict": {
        "conf": 0.25,
        "nms_iou": 0.45,
    },
}


def _merge(base, override, path=""):
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {where!r} must be a mapping")
            out[key] = _merge(base[key], value, where)
        else:
            out[key] = value
    return out


def load_run_config(path=None) -> dict:
    """Defaults merged with an optional YAML file."""
    if path is None:
        return copy.deepcopy(DEFAULTS)
    text = Path(path).read_text()
    loaded = yaml.safe_load(text) or {}
    if not isinstance(loaded, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return _merge(DEFAULTS, loaded)


def apply_overrides(config: dict, overrides: dict) -> dict:
    """Overlay non-None leaf values given as {'section.key': value}."""
    out = copy.deepcopy(config)
    for dotted, value in overrides.items():
        if value is None:
            continue
        section, key = dotted.split(".", 1)
        if section not in out or key not in out[section]:
            raise ConfigError(f"unknown config key {dotted!r}")
        out[section][key] = value
    return out
