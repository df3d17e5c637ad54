"""Layered configuration: built-in defaults < preset < JSON file < flags.

The resolved document is a JSON object with the sections below.  Unknown
sections or keys are rejected so that typos never pass silently.

    render    camera and shading (RenderConfig)
    binning   bin counts per angle: azi, ele, inp
    network   encoder and head sizes (PoseNetworkConfig, minus the bins)
    training  batch size, lr schedule, seed (TrainConfig) plus ``mode``
    datagen   synthetic data protocol (DatagenConfig)
    augment   image and shape augmentation (AugmentConfig)
"""
from __future__ import annotations

import copy
import json
from dataclasses import asdict, fields
from pathlib import Path

from .datagen import AugmentConfig, DatagenConfig, config_sha256
from .model import PoseNetworkConfig
from .render import RenderConfig
from .trainloop import DESK_SCHEDULE, TrainConfig


class ConfigError(ValueError):
    pass


_BIN_KEYS = ("bins_azi", "bins_ele", "bins_inp")


def defaults():
    net = asdict(PoseNetworkConfig())
    for k in _BIN_KEYS:
        net.pop(k)
    training = asdict(TrainConfig())
    training["mode"] = "mv"
    training["schedule"] = [list(s) for s in training["schedule"]]
    cfg = {
        "render": asdict(RenderConfig()),
        "binning": {"azi": 24, "ele": 12, "inp": 24},
        "network": net,
        "training": training,
        "datagen": asdict(DatagenConfig()),
        "augment": asdict(AugmentConfig()),
    }
    return _jsonable(cfg)


PRESETS = {
    "default": {},
    # shorter schedule for desk-scale data, same 10x drop halfway
    "desk": {"training": {"schedule": [list(s) for s in DESK_SCHEDULE]}},
    # small, fast network and 32 px images for CPU experiments
    "toy": {
        "render": {"size": 32},
        "network": {"image_size": 32, "image_widths": [16, 32, 32, 64], "n_points": 512,
                    "view_size": 32, "view_widths": [8, 16, 16, 32],
                    "point_widths": [64, 128, 256]},
        "training": {"schedule": [[1e-3, 30], [1e-4, 30]], "mode": "pc"},
        "datagen": {"image_size": 32, "view_size": 32, "n_points": 512},
    },
}


def _jsonable(obj):
    return json.loads(json.dumps(obj))


def merge(base, override, where=""):
    """Deep-merge ``override`` into a copy of ``base``; unknown keys raise."""
    out = copy.deepcopy(base)
    for key, value in override.items():
        path = f"{where}.{key}" if where else key
        if key not in out:
            raise ConfigError(f"unknown config key {path}")
        if isinstance(out[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{path} must be an object")
            out[key] = merge(out[key], value, path)
        else:
            out[key] = value
    return out


def parse_assignment(text):
    """``section.key=value`` with a JSON value (bare words become strings)."""
    if "=" not in text or "." not in text.split("=", 1)[0]:
        raise ConfigError(f"override {text!r} must look like section.key=value")
    path, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node = value
    for part in reversed(path.split(".")):
        node = {part: node}
    return node


def resolve(preset="default", path=None, overrides=()):
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    cfg = merge(defaults(), PRESETS[preset])
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        try:
            doc = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{p}: invalid JSON ({exc})") from None
        if not isinstance(doc, dict):
            raise ConfigError(f"{p}: top level must be an object")
        cfg = merge(cfg, doc)
    for ov in overrides:
        cfg = merge(cfg, ov)
    build_all(cfg)  # type and range validation
    return _jsonable(cfg)


def sha256(cfg):
    return config_sha256(cfg)


def _build(cls, section, data):
    names = {f.name for f in fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"unknown key {section}.{sorted(unknown)[0]}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {section} section: {exc}") from None


def render_config(cfg):
    return _build(RenderConfig, "render", cfg["render"])


def network_config(cfg, mode=None):
    net = dict(cfg["network"])
    b = cfg["binning"]
    net.update({"bins_azi": b["azi"], "bins_ele": b["ele"], "bins_inp": b["inp"]})
    if mode is not None:
        net["shape_mode"] = mode
    elif "mode" in cfg["training"]:
        net["shape_mode"] = cfg["training"]["mode"]
    return _build(PoseNetworkConfig, "network", net)


def train_config(cfg):
    t = {k: v for k, v in cfg["training"].items() if k != "mode"}
    t["schedule"] = tuple(tuple(s) for s in t["schedule"])
    return _build(TrainConfig, "training", t)


def datagen_config(cfg):
    return _build(DatagenConfig, "datagen", cfg["datagen"])


def augment_config(cfg):
    return _build(AugmentConfig, "augment", cfg["augment"])


def build_all(cfg):
    if set(cfg) != set(defaults()):
        extra = set(cfg) - set(defaults())
        raise ConfigError(f"unknown config section {sorted(extra)[0]}" if extra
                          else "config is missing sections")
    if cfg["training"].get("mode") not in ("pc", "mv"):
        raise ConfigError("training.mode must be 'pc' or 'mv'")
    return (render_config(cfg), network_config(cfg), train_config(cfg), datagen_config(cfg),
            augment_config(cfg))


def data_sections(cfg):
    """The sections a dataset depends on (used for stale-manifest checks)."""
    return {"datagen": cfg["datagen"], "render": cfg["render"]}
