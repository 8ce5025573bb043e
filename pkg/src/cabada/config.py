"""Run configuration: defaults, file loading, strict merging, builders.

A run configuration is a plain nested dict. ``DEFAULT_CONFIG`` holds every
recognized key; a JSON config file and command-line overrides are merged
on top of it, and any key absent from the defaults is rejected rather
than silently carried along. Builders turn validated sections into the
dataclasses the pipeline modules consume.
"""

from __future__ import annotations

import copy
import json
import math
import os
from dataclasses import asdict
from pathlib import Path

from .data import DatasetIndex, SynthConfig
from .discrepancy import KernelConfig
from .errors import ConfigError
from .mixer import MixerConfig
from .splits import AXES, SplitSpec
from .trainer import TrainConfig

ENV_SEED = "CABA_SEED"

WD_CHOICES = ("raw", "features")


def _section_from(dataclass_obj, drop: tuple[str, ...] = ()) -> dict:
    section = asdict(dataclass_obj)
    for key in drop:
        section.pop(key, None)
    return section


# The seed lives at the top level and is injected into every component, so
# the per-dataclass seed fields are dropped from their sections.
DEFAULT_CONFIG: dict = {
    "data": "",
    "out": "",
    "checkpoint": "",
    "seed": None,
    "jobs": 1,
    "force": False,
    "wd_on": "features",
    "model": {
        "timesteps": None,
        "groups": None,
        "group_features": None,
        "classes": None,
        "width": 16,
        "depth": 2,
        "temporal_hidden": 32,
        "channel_hidden": 32,
    },
    "train": _section_from(TrainConfig(), drop=("seed",)),
    "kernel": _section_from(KernelConfig()),
    "synth": _section_from(SynthConfig(), drop=("seed",)),
    "split": {"axes": list(AXES), "test_fraction": 1.0 / 3.0},
    "kfold": {"k": 2, "val_fraction": 0.1},
    "grid": {"learning_rate": [1e-3, 1e-2], "dropout": [0.0], "alpha": [0.5, 1.0]},
    "diagnose": {"batches": 20, "batch_size": 32},
    "mask": {"masks": "auto", "bootstrap": 0},
}


def load_config(path) -> dict:
    """Read a JSON config file into a plain dict."""
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file {p} does not exist")
    try:
        loaded = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {p} is not valid JSON: {exc}") from exc
    if not isinstance(loaded, dict):
        raise ConfigError(f"config file {p} must hold a JSON object")
    return loaded


def merge_config(base: dict, override: dict, path: str = "") -> dict:
    """Overlay ``override`` onto ``base``, rejecting unknown keys.

    Sections merge recursively; scalars and lists replace wholesale. The
    dotted path of any unrecognized key is reported.
    """
    merged = copy.deepcopy(base)
    for key, value in override.items():
        dotted = f"{path}{key}"
        if key not in merged:
            raise ConfigError(f"unknown config key '{dotted}'")
        if isinstance(merged[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(
                    f"config key '{dotted}' expects a section, "
                    f"got {type(value).__name__}"
                )
            merged[key] = merge_config(merged[key], value, dotted + ".")
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def resolve_seed(cli_seed, file_seed) -> int:
    """Seed precedence: command line, then config file, then CABA_SEED, then 0."""
    if cli_seed is not None:
        return int(cli_seed)
    if file_seed is not None:
        if isinstance(file_seed, bool) or not isinstance(file_seed, int):
            raise ConfigError(f"seed must be an integer, got {file_seed!r}")
        return file_seed
    env = os.environ.get(ENV_SEED)
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise ConfigError(
                f"{ENV_SEED} must be an integer, got {env!r}"
            ) from None
    return 0


def _require_int(value, key: str, minimum: int) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(f"{key} must be an integer")
    if value < minimum:
        raise ConfigError(f"{key} must be >= {minimum}")
    return value


def _require_number(value, key: str):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{key} must be a number")
    if not math.isfinite(value):
        raise ConfigError(f"{key} must be finite")
    return value


def _validate_model_section(model: dict) -> None:
    for key in ("timesteps", "groups", "group_features", "classes"):
        if model[key] is not None:
            _require_int(model[key], f"model.{key}", 1)
    for key in ("width", "temporal_hidden", "channel_hidden"):
        _require_int(model[key], f"model.{key}", 1)
    _require_int(model["depth"], "model.depth", 0)


def _validate_grid_section(grid: dict) -> None:
    for key, values in grid.items():
        if not isinstance(values, list) or not values:
            raise ConfigError(f"grid.{key} must be a non-empty list")
        for v in values:
            _require_number(v, f"grid.{key}")
    for lr in grid["learning_rate"]:
        if lr <= 0:
            raise ConfigError("grid.learning_rate values must be positive")
    for dropout in grid["dropout"]:
        if not (0.0 <= dropout < 1.0):
            raise ConfigError("grid.dropout values must lie in [0, 1)")
    for alpha in grid["alpha"]:
        if alpha < 0:
            raise ConfigError("grid.alpha values must be non-negative")


def _validate_mask_section(mask: dict) -> None:
    masks = mask["masks"]
    if masks != "auto":
        if not isinstance(masks, list) or not all(
            isinstance(m, list) for m in masks
        ):
            raise ConfigError("mask.masks must be 'auto' or a list of lists")
        for m in masks:
            for g in m:
                _require_int(g, "mask.masks entries", 0)
    _require_int(mask["bootstrap"], "mask.bootstrap", 0)


def validate_config(cfg: dict) -> None:
    """Check every section before any compute is attempted."""
    for key in ("data", "out", "checkpoint"):
        if not isinstance(cfg[key], str):
            raise ConfigError(f"{key} must be a string path")
    if cfg["seed"] is not None:
        if isinstance(cfg["seed"], bool) or not isinstance(cfg["seed"], int):
            raise ConfigError("seed must be an integer")
    _require_int(cfg["jobs"], "jobs", 1)
    if not isinstance(cfg["force"], bool):
        raise ConfigError("force must be a boolean")
    if cfg["wd_on"] not in WD_CHOICES:
        raise ConfigError(f"wd_on must be one of {WD_CHOICES}, got {cfg['wd_on']!r}")
    _validate_model_section(cfg["model"])
    try:
        build_train_config(cfg, seed=0).validate()
        build_kernel_config(cfg).validate()
        build_synth_config(cfg, seed=0).validate()
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid config value: {exc}") from exc
    axes = cfg["split"]["axes"]
    if not isinstance(axes, list) or not axes:
        raise ConfigError("split.axes must be a non-empty list")
    if len(set(axes)) != len(axes):
        raise ConfigError("split.axes must not repeat an axis")
    for axis in axes:
        SplitSpec(axis=axis, test_fraction=cfg["split"]["test_fraction"]).validate()
    _require_int(cfg["kfold"]["k"], "kfold.k", 2)
    val_fraction = _require_number(cfg["kfold"]["val_fraction"], "kfold.val_fraction")
    if not (0.0 < val_fraction < 1.0):
        raise ConfigError("kfold.val_fraction must lie in (0, 1)")
    _validate_grid_section(cfg["grid"])
    _require_int(cfg["diagnose"]["batches"], "diagnose.batches", 1)
    _require_int(cfg["diagnose"]["batch_size"], "diagnose.batch_size", 1)
    _validate_mask_section(cfg["mask"])


def build_synth_config(cfg: dict, seed: int) -> SynthConfig:
    """Synthesis knobs with the run seed injected."""
    return SynthConfig(**cfg["synth"], seed=seed)


def build_train_config(cfg: dict, seed: int) -> TrainConfig:
    """Training knobs with the run seed injected."""
    return TrainConfig(**cfg["train"], seed=seed)


def build_kernel_config(cfg: dict) -> KernelConfig:
    """Kernel knobs as configured (bandwidths may stay 'median')."""
    return KernelConfig(**cfg["kernel"])


def build_mixer_config(cfg: dict, index: DatasetIndex) -> MixerConfig:
    """Architecture from the model section, geometry taken from the data.

    The geometry keys (timesteps, groups, group_features, classes) default
    to the dataset's own values; setting one explicitly only pins it, and a
    mismatch against the dataset is a configuration error.
    """
    model = cfg["model"]
    s_len, d_len, groups = index.shape
    derived = {
        "timesteps": s_len,
        "groups": groups,
        "group_features": d_len // groups,
        "classes": index.class_count,
    }
    for key, value in derived.items():
        pinned = model[key]
        if pinned is not None and pinned != value:
            raise ConfigError(
                f"model.{key}={pinned} conflicts with the dataset value {value}"
            )
    return MixerConfig(
        width=model["width"],
        depth=model["depth"],
        temporal_hidden=model["temporal_hidden"],
        channel_hidden=model["channel_hidden"],
        **derived,
    )
