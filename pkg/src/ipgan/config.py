"""Layered run configuration: bundled defaults <- config file <- ``section.key=value`` overrides.

Files are INI (``[section]`` / ``key = value``). Every key must exist in
:data:`DEFAULTS`; values are coerced to the default's type.
"""

from __future__ import annotations

import configparser
import copy
from importlib import resources
from pathlib import Path

from .evaluation import METRICS


class ConfigError(ValueError):
    """Bad configuration; ``key`` names the offending dotted key when known."""

    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key


DEFAULTS = {
    "data": {
        "num_identities": 20,
        "num_cameras": 4,
        "images_per_identity_per_camera": 2,
        "height": 32,
        "width": 16,
        "num_test_identities": 0,
        "num_distractors": 0,
        "source_root": "",
        "target_root": "",
    },
    "gan": {
        "base_channels": 32,
        "num_residual_blocks": 3,
        "disc_base_channels": 32,
        "disc_layers": 3,
        "leaky_slope": 0.01,
        "non_saturating": False,
    },
    "gan_train": {
        "epochs": 60,
        "lr": 1e-4,
        "batch_size": 16,
        "beta1": 0.5,
        "beta2": 0.999,
        "d_steps_per_g_step": 1,
        "checkpoint_every": 10,
        "log_every": 10,
    },
    "weights": {
        "lambda_dom": 1.0,
        "lambda_rec": 10.0,
        "lambda_sem": 1.0,
    },
    "reid": {
        "stage_channels": (16, 32, 64, 128),
        "blocks_per_stage": (1, 1, 1, 1),
        "block": "basic",
        "stem": "compact",
        "stem_channels": 16,
        "embedding_dim": 1024,
        "use_ibn": False,
        "feature_source": "embedding",
    },
    "reid_train": {
        "epochs": 30,
        "lr": 1e-3,
        "batch_size": 16,
        "beta1": 0.9,
        "beta2": 0.999,
        "labels": "identity",
        "flip": False,
    },
    "protocol": {
        "metric": "euclidean",
        "max_rank": 10,
    },
    "inputs": {
        "data": "",
        "dsem": "",
        "generator": "",
        "train": "",
        "model": "",
        "classifier": "",
        "camera_classifier": "",
        "translated": "",
        "summaries": "",
    },
    "run": {
        "seed": 0,
        "label": "",
        "resume": "",
        "plots": False,
    },
}

CHOICES = {
    "protocol.metric": METRICS,
    "reid.block": ("basic", "bottleneck"),
    "reid.stem": ("compact", "imagenet"),
    "reid.feature_source": ("embedding", "backbone_pool"),
    "reid_train.labels": ("identity", "camera"),
}

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _coerce(key, raw, default):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(int(v) for v in raw.replace(" ", "").split(",") if v)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(default).__name__}", key) from None
    return raw


def _set(cfg, key, raw):
    section, dot, name = key.partition(".")
    if not dot or section not in DEFAULTS or name not in DEFAULTS[section]:
        raise ConfigError(f"unknown config key {key!r}", key)
    cfg[section][name] = _coerce(key, raw, DEFAULTS[section][name])


def bundled_config(name):
    """Path-like handle to a config shipped with the package (``desk.cfg``, ``paper.cfg``)."""
    return resources.files("ipgan").joinpath("configs", name)


def read_config_file(path, cfg):
    p = Path(path)
    if not p.is_file():
        bundled = bundled_config(p.name)
        if str(path) == p.name and bundled.is_file():
            text = bundled.read_text()
        else:
            raise ConfigError(f"config file not found: {path}")
    else:
        text = p.read_text()
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse config file {path}: {exc}") from None
    for section in parser.sections():
        for name, raw in parser.items(section):
            _set(cfg, f"{section}.{name}", raw)


def validate(cfg):
    for key, allowed in CHOICES.items():
        section, name = key.split(".")
        if cfg[section][name] not in allowed:
            raise ConfigError(f"{key}={cfg[section][name]!r} is not one of {', '.join(allowed)}", key)
    positive = ["protocol.max_rank", "gan_train.epochs", "reid_train.epochs", "gan_train.batch_size", "reid_train.batch_size"]
    for key in positive:
        section, name = key.split(".")
        if cfg[section][name] < 1:
            raise ConfigError(f"{key} must be >= 1", key)
    for key in ("gan_train.epochs", "reid_train.epochs"):
        section, name = key.split(".")
        if cfg[section][name] % 2:
            raise ConfigError(f"{key} must be even (the learning-rate schedule splits it in half)", key)
    for name in ("lambda_dom", "lambda_rec", "lambda_sem"):
        if cfg["weights"][name] < 0:
            raise ConfigError(f"weights.{name} must be non-negative", f"weights.{name}")
    if len(cfg["reid"]["stage_channels"]) != 4 or len(cfg["reid"]["blocks_per_stage"]) != 4:
        raise ConfigError("reid backbone needs four stages", "reid.stage_channels")
    return cfg


def resolve(config_path=None, overrides=(), seed=None):
    """Merge the layers and validate; returns a nested dict."""
    cfg = copy.deepcopy(DEFAULTS)
    if config_path:
        read_config_file(config_path, cfg)
    for item in overrides:
        key, eq, value = item.partition("=")
        if not eq:
            raise ConfigError(f"override {item!r} is not key=value", key or None)
        _set(cfg, key.strip(), value)
    if seed is not None:
        cfg["run"]["seed"] = int(seed)
    return validate(cfg)


def dumps(cfg):
    lines = []
    for section, values in cfg.items():
        lines.append(f"[{section}]")
        for name, value in values.items():
            if isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            elif isinstance(value, bool):
                value = str(value).lower()
            lines.append(f"{name} = {value}")
        lines.append("")
    return "\n".join(lines)
