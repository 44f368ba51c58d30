"""Flat experiment configuration: schema, validation and conversion.

A config file is one YAML (or JSON) mapping. Every key is optional and
unknown keys are rejected, so a typo in a loss weight fails loudly instead of
silently falling back to a default.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Any

import yaml

from .errors import ConfigError, TCILError
from .losses import KdConfig
from .protocol import Protocol, SelectionMethod
from .trainer import AUGMENTATIONS, ExperimentConfig, TrainConfig

_NUM = (int, float)

# key -> (accepted types, default)
SCHEMA: dict[str, tuple[tuple[type, ...], Any]] = {
    # dataset descriptor
    "dataset": ((str,), "gaussian"),
    "dataset_root": ((str, type(None)), None),
    "num_classes": ((int,), 10),
    "image_size": ((int,), 32),
    "channels": ((int,), 3),
    "train_per_class": ((int,), 200),
    "test_per_class": ((int,), 100),
    "noise": (_NUM, 1.0),
    "template_res": ((int,), 4),
    "shared": (_NUM, 0.0),
    "max_shift": ((int,), 2),
    "data_seed": ((int,), 0),
    # protocol
    "protocol": ((str,), "B0"),
    "num_steps": ((int,), 5),
    "class_order": ((str, type(None)), None),
    "seed": ((int,), 0),
    "memory_budget": ((int,), 2000),
    "selection_method": ((str,), "herding"),
    # model
    "arch": ((str,), "convnet"),
    "widths": ((list, type(None)), None),
    "reduction": ((int,), 16),
    "use_fusion": ((bool,), True),
    "expand": ((bool,), True),
    "use_rescore": ((bool,), True),
    "classifier_bias": ((bool,), False),
    # optimization
    "lr": (_NUM, 0.1),
    "momentum": (_NUM, 0.9),
    "weight_decay": (_NUM, 5e-4),
    "batch_size": ((int,), 128),
    "epochs_per_step": ((int,), 30),
    "warmup_epochs": ((int,), 3),
    "lr_milestones": ((list,), [20, 25]),
    "lr_decay": (_NUM, 0.1),
    "augmentation": ((list,), ["crop", "flip"]),
    "eval_batch_size": ((int,), 512),
    "grad_clip": ((int, float, type(None)), None),
    # losses
    "temperature": (_NUM, 2.0),
    "lam": (_NUM, 0.5),
    "mu": (_NUM, 0.5),
    "alpha": (_NUM, 1.0),
    "beta": (_NUM, 1.0),
    "feature_kd_on": ((str,), "maps"),
    # analysis
    "onc_rule": ((str,), "either"),
}

DATASET_KEYS = (
    "dataset", "dataset_root", "num_classes", "image_size", "channels", "train_per_class",
    "test_per_class", "noise", "template_res", "shared", "max_shift", "data_seed",
)
# Keys that locate inputs rather than define the experiment; excluded from the config hash.
UNHASHED_KEYS = ("dataset_root",)

_CHOICES = {
    "protocol": [p.value for p in Protocol],
    "selection_method": [m.value for m in SelectionMethod],
    "arch": ["convnet", "resnet18"],
    "feature_kd_on": ["maps", "pooled"],
    "onc_rule": ["either", "predicted"],
}


def validate_config(raw: Any) -> dict:
    """Fill defaults and check types; every offending key is listed in one error."""
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping of keys to values")
    unknown = sorted(set(raw) - set(SCHEMA))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    problems = []
    config = {}
    for key, (types, default) in SCHEMA.items():
        value = raw.get(key, default)
        # bool is an int subclass; never accept it where a number is expected
        if isinstance(value, bool) and bool not in types:
            problems.append(f"{key}: expected {'/'.join(t.__name__ for t in types)}, got bool")
            continue
        if not isinstance(value, types):
            problems.append(f"{key}: expected {'/'.join(t.__name__ for t in types)}, got {type(value).__name__}")
            continue
        if key in _CHOICES and value not in _CHOICES[key]:
            problems.append(f"{key}: {value!r} is not one of {_CHOICES[key]}")
            continue
        config[key] = list(value) if isinstance(value, list) else value
    if "augmentation" in config:
        bad = sorted(set(config["augmentation"]) - set(AUGMENTATIONS))
        if bad:
            problems.append(f"augmentation: unknown policies {bad}")
    if problems:
        raise ConfigError("invalid config: " + "; ".join(problems))
    return config


def load_config(path: str | Path) -> dict:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML/JSON: {exc}".replace("\n", " ")) from None
    return validate_config(raw)


def hashed_view(config: dict) -> dict:
    return {k: v for k, v in config.items() if k not in UNHASHED_KEYS}


def config_diff(old: dict, new: dict) -> list[str]:
    """Human-readable ``key: old -> new`` lines for every differing key."""
    lines = []
    for key in sorted(set(old) | set(new)):
        if old.get(key) != new.get(key):
            lines.append(f"{key}: {old.get(key)!r} -> {new.get(key)!r}")
    return lines


@dataclass(frozen=True)
class RunSpec:
    experiment: ExperimentConfig
    dataset: dict
    protocol: str
    num_steps: int
    class_order: str | None
    onc_rule: str


def to_run_spec(config: dict) -> RunSpec:
    """Turn a validated flat config into the trainer's structured configs."""
    try:
        train = TrainConfig(
            lr=float(config["lr"]),
            momentum=float(config["momentum"]),
            weight_decay=float(config["weight_decay"]),
            batch_size=config["batch_size"],
            epochs_per_step=config["epochs_per_step"],
            warmup_epochs=config["warmup_epochs"],
            lr_milestones=tuple(config["lr_milestones"]),
            lr_decay=float(config["lr_decay"]),
            seed=config["seed"],
            augmentation=tuple(config["augmentation"]),
            eval_batch_size=config["eval_batch_size"],
            grad_clip=None if config["grad_clip"] is None else float(config["grad_clip"]),
        )
        kd = KdConfig(
            temperature=float(config["temperature"]),
            lam=float(config["lam"]),
            mu=float(config["mu"]),
            alpha=float(config["alpha"]),
            beta=float(config["beta"]),
            feature_kd_on=config["feature_kd_on"],
        )
        arch = {"kind": config["arch"], "in_channels": config["channels"]}
        if config["widths"] is not None:
            arch["widths"] = list(config["widths"])
        experiment = ExperimentConfig(
            train=train,
            kd=kd,
            memory_budget=config["memory_budget"],
            selection_method=config["selection_method"],
            arch=arch,
            reduction=config["reduction"],
            expand=config["expand"],
            use_fusion=config["use_fusion"],
            use_rescore=config["use_rescore"],
            classifier_bias=config["classifier_bias"],
        )
    except TCILError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid config: {exc}") from None
    return RunSpec(
        experiment=experiment,
        dataset={k: config[k] for k in DATASET_KEYS},
        protocol=config["protocol"],
        num_steps=config["num_steps"],
        class_order=config["class_order"],
        onc_rule=config["onc_rule"],
    )
