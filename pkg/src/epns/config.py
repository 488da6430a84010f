"""Run configuration: one YAML tree drives generation, training and evaluation.

Built-in presets ``desk`` and ``paper`` differ only in scale parameters
(dataset sizes, widths and kernels, epochs, batch size, annealing period,
ensemble and rollout lengths); ``SCALE_KEYS`` lists them.
"""
from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
from pathlib import Path

import yaml

from .cpm import CPMConfig
from .nbody import NBodyConfig
from .training import TrainConfig

SYSTEMS = ("celestial", "cellular")
PRESETS = ("desk", "paper")


class ConfigError(ValueError):
    pass


def _base(system: str) -> dict:
    if system == "celestial":
        return {
            "system": "celestial", "seed": 0, "preset": "desk",
            "generator": dataclasses.asdict(NBodyConfig()),
            "dataset": {"train": 80, "val": 10, "test": 10, "ensemble": 100},
            "model": {"hidden": 128, "latent": 16, "forward_layers": 5, "prior_layers": 5, "decoder_layers": 3,
                      "equivariant": True},
            "training": dataclasses.asdict(TrainConfig.celestial()),
            "evaluation": {"rollouts": 100, "rollout_steps": 100, "observable": "kinetic_energy",
                           "equivariance_x0s": 100, "equivariance_steps": 20, "rollouts_per_x0": 10,
                           "stability_steps": 200, "dks_times": [50, 100]},
        }
    if system == "cellular":
        gen = dataclasses.asdict(CPMConfig())
        gen["contact_energy"] = [list(r) for r in gen["contact_energy"]]
        return {
            "system": "cellular", "seed": 0, "preset": "desk",
            "generator": gen,
            "dataset": {"train": 80, "val": 10, "test": 10, "ensemble": 20},
            "model": {"embed": 32, "message": 32, "unet_widths": [64, 128, 256], "encoder_width": 32, "latent": 64,
                      "message_kernel": 9, "unet_kernel": 5, "encoder_kernel": 9, "latent_channels": 64,
                      "sample_mode": "argmax", "stay_logit": 4.0},
            "training": dataclasses.asdict(TrainConfig.cellular()),
            "evaluation": {"rollouts": 20, "rollout_steps": 40, "observable": "cluster_count",
                           "equivariance_x0s": 30, "equivariance_steps": 3, "rollouts_per_x0": 10,
                           "stability_steps": 28, "dks_times": [20, 40]},
        }
    raise ConfigError(f"unknown system {system!r}; choose one of {SYSTEMS}")


# the only keys a preset may change
SCALE_KEYS = frozenset({
    "dataset.train", "dataset.val", "dataset.test", "dataset.ensemble",
    "model.hidden", "model.embed", "model.message", "model.unet_widths", "model.encoder_width",
    "model.message_kernel", "model.unet_kernel", "model.encoder_kernel", "model.latent_channels",
    "training.epochs", "training.beta_period", "training.batch_size",
    "evaluation.rollouts", "evaluation.equivariance_steps", "evaluation.stability_steps",
})


def flat_keys(tree: dict, prefix: str = "") -> dict:
    """Dotted-path view of a nested mapping."""
    out = {}
    for k, v in tree.items():
        if isinstance(v, dict):
            out.update(flat_keys(v, f"{prefix}{k}."))
        else:
            out[prefix + k] = v
    return out


_PRESETS = {
    ("celestial", "desk"): {
        "model": {"hidden": 32},
        "training": {"epochs": 300, "beta_period": 1, "batch_size": 8},
    },
    ("celestial", "paper"): {
        "dataset": {"train": 800, "val": 100, "test": 100},
        "training": {"epochs": 40000, "beta_period": 200},
        "evaluation": {"equivariance_steps": 100, "stability_steps": 1000},
    },
    ("cellular", "desk"): {
        "model": {"embed": 8, "message": 8, "unet_widths": [8, 8, 16], "encoder_width": 8, "message_kernel": 5,
                  "unet_kernel": 3, "encoder_kernel": 3, "latent_channels": 4},
        "training": {"epochs": 30, "batch_size": 1},
    },
    ("cellular", "paper"): {
        "training": {"epochs": 180},
        "dataset": {"train": 800, "val": 100, "test": 100, "ensemble": 100},
        "evaluation": {"rollouts": 100, "stability_steps": 200},
    },
}


def merge(base: dict, over: dict, path: str = "") -> dict:
    """Recursive update; keys absent from ``base`` are rejected."""
    out = copy.deepcopy(base)
    for k, v in over.items():
        if k not in out:
            raise ConfigError(f"unknown config key {path + k!r}")
        if isinstance(out[k], dict) and not isinstance(v, dict):
            raise ConfigError(f"config key {path + k!r} must be a mapping")
        out[k] = merge(out[k], v, f"{path}{k}.") if isinstance(out[k], dict) else copy.deepcopy(v)
    return out


def defaults(system: str, preset: str = "desk") -> dict:
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose one of {PRESETS}")
    cfg = merge(_base(system), _PRESETS[(system, preset)])
    cfg["preset"] = preset
    return cfg


def load_config(path=None, preset: str | None = None, system: str | None = None, overrides: dict | None = None) -> dict:
    """Defaults for (system, preset), then the YAML file, then explicit overrides."""
    user = {}
    if path is not None:
        try:
            user = yaml.safe_load(Path(path).read_text()) or {}
        except (OSError, yaml.YAMLError) as err:
            raise ConfigError(f"cannot read config {path}: {err}") from err
        if not isinstance(user, dict):
            raise ConfigError(f"config {path} must be a mapping at top level")
    system = system or user.get("system")
    if system is None:
        raise ConfigError("config must name a system (celestial or cellular)")
    cfg = defaults(system, preset or user.get("preset", "desk"))
    user = {k: v for k, v in user.items() if k != "preset"}
    cfg = merge(cfg, user)
    if overrides:
        cfg = merge(cfg, overrides)
    validate(cfg)
    return cfg


def validate(cfg: dict) -> None:
    try:
        generator_config(cfg)
        train_config(cfg)
    except (TypeError, ValueError) as err:
        raise ConfigError(str(err)) from err
    for split in ("train", "val", "test"):
        if int(cfg["dataset"][split]) < 1:
            raise ConfigError(f"dataset.{split} must be >= 1")


def generator_config(cfg: dict):
    g = dict(cfg["generator"])
    g["seed"] = int(cfg["seed"])
    if cfg["system"] == "celestial":
        return NBodyConfig(**g)
    return CPMConfig(**g)


def train_config(cfg: dict, seed: int | None = None) -> TrainConfig:
    t = dict(cfg["training"])
    t["seed"] = int(cfg["seed"] if seed is None else seed)
    return TrainConfig(**t)


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()[:16]


def data_hash(cfg: dict) -> str:
    """Hash of the settings that determine generated data bytes."""
    return config_hash({k: cfg[k] for k in ("system", "seed", "generator", "dataset")})


def dump_config(cfg: dict) -> str:
    return yaml.safe_dump(cfg, sort_keys=False)
