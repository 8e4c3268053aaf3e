"""Run configuration: one JSON document with a section per pipeline stage.

Unspecified keys take their defaults; unknown keys are rejected with the
dotted path of the offending key.
"""

from __future__ import annotations

import copy
import json
from importlib import resources
from pathlib import Path

from .autoencoder import SaneConfig
from .errors import ConfigError
from .sample import SampleConfig
from .zoo import Architecture, TaskSpec, ZooConfig, cnn_arch, mlp_arch

ARCH_KINDS = ("mlp", "cnn")

DEFAULTS = {
    "seed": 0,
    "zoo": {
        "arch": {"kind": "mlp", "d_in": 2, "hidden": [16, 16], "channels": [8, 8], "n_classes": 2,
                 "input_shape": [1, 8, 8], "batchnorm": True, "kernel": 3},
        "task": {"generator": "two-rings", "n_classes": 2, "input_shape": [2], "noise": 0.1, "seed": 0},
        "n_models": 64, "epochs": 25, "snapshot_epochs": [1, 5, 10, 25], "lr": 1e-3, "batch_size": 32,
        "n_train": 512, "n_val": 256, "n_test": 512,
    },
    "align": {"reference": None, "max_sweeps": 50, "standardized": False},
    "sane": {k: v for k, v in SaneConfig().to_dict().items() if k != "seed"},
    "embed": {"chunk": None, "halo": None},
    "probe": {"targets": ["acc", "ep", "ggap"], "lambda": 1e-3},
    "analyze": {"min_tail": 10},
    "prompts": {"count": 5, "split": "train", "epoch": None},
    "sample": {k: v for k, v in SampleConfig().to_dict().items() if k != "seed"},
    "finetune": {"epochs": 1, "lr": 1e-3, "batch_size": 32, "scratch_seeds": 5},
}


def _type_ok(default, value):
    if default is None or value is None:
        return True
    if isinstance(default, bool):
        return isinstance(value, bool)
    if isinstance(default, (int, float)):
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if isinstance(default, list):
        return isinstance(value, list)
    return isinstance(value, type(default))


def _merge(defaults: dict, user: dict, path: str) -> dict:
    if not isinstance(user, dict):
        raise ConfigError(f"{path or 'config'} must be an object", key_path=path or None)
    out = copy.deepcopy(defaults)
    for key, value in user.items():
        kp = f"{path}.{key}" if path else key
        if key not in defaults:
            raise ConfigError(f"unknown config key {kp!r}", key_path=kp)
        if isinstance(defaults[key], dict):
            out[key] = _merge(defaults[key], value, kp)
        elif not _type_ok(defaults[key], value):
            raise ConfigError(f"config key {kp!r} has wrong type {type(value).__name__}", key_path=kp)
        else:
            out[key] = value
    return out


def resolve(user: dict) -> dict:
    """Defaults overlaid with ``user``; every section is validated by building its objects."""
    cfg = _merge(DEFAULTS, user, "")
    build_arch(cfg)
    build_task(cfg)
    zoo_config(cfg)
    sane_config(cfg)
    sample_config(cfg)
    if cfg["zoo"]["arch"]["kind"] not in ARCH_KINDS:
        raise ConfigError(f"arch kind must be one of {ARCH_KINDS}", key_path="zoo.arch.kind")
    return cfg


def bundled_names():
    return sorted(p.name[:-5] for p in resources.files("sane.configs").iterdir() if p.name.endswith(".json"))


def load(path_or_name) -> dict:
    """Read and resolve a config file; a bare bundled name (e.g. ``desk``) is also accepted."""
    p = Path(path_or_name)
    if not p.exists() and str(path_or_name) in bundled_names():
        text = resources.files("sane.configs").joinpath(f"{path_or_name}.json").read_text(encoding="utf-8")
    else:
        text = p.read_text(encoding="utf-8")
    try:
        user = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    return resolve(user)


def build_arch(cfg) -> Architecture:
    a = cfg["zoo"]["arch"]
    try:
        if a["kind"] == "mlp":
            return mlp_arch(a["d_in"], tuple(a["hidden"]), a["n_classes"])
        if a["kind"] == "cnn":
            return cnn_arch(tuple(a["channels"]), a["n_classes"], tuple(a["input_shape"]), a["batchnorm"], a["kernel"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid architecture: {exc}", key_path="zoo.arch") from exc
    raise ConfigError(f"unknown architecture kind {a['kind']!r}", key_path="zoo.arch.kind")


def build_task(cfg) -> TaskSpec:
    t = cfg["zoo"]["task"]
    return TaskSpec(t["generator"], t["n_classes"], tuple(t["input_shape"]), t["noise"], t["seed"])


def zoo_config(cfg) -> ZooConfig:
    z = cfg["zoo"]
    zc = ZooConfig(n_models=z["n_models"], epochs=z["epochs"], snapshot_epochs=tuple(z["snapshot_epochs"]),
                   lr=z["lr"], batch_size=z["batch_size"], n_train=z["n_train"], n_val=z["n_val"],
                   n_test=z["n_test"], seed=cfg["seed"])
    if not z["snapshot_epochs"] or max(z["snapshot_epochs"]) > z["epochs"]:
        raise ConfigError("snapshot epochs must be non-empty and <= epochs", key_path="zoo.snapshot_epochs")
    return zc


def sane_config(cfg) -> SaneConfig:
    return SaneConfig.from_dict({**cfg["sane"], "seed": cfg["seed"]})


def sample_config(cfg) -> SampleConfig:
    return SampleConfig.from_dict({**cfg["sample"], "seed": cfg["seed"]})
