"""Run configuration: layered defaults, profile presets, a YAML config file,
and command-line overrides, validated in full before any command does work.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Optional

import yaml

from .data.toy import ToySpec
from .detect import ConfigError, DetectorConfig
from .reid import LossWeights
from .synthgan import GanProfile

PROFILES = ("toy", "full", "cuhk", "prw")

DEFAULTS: dict[str, Any] = {
    "profile": "toy",
    "seed": 0,
    "out": None,
    "deterministic": True,
    "data": {
        "dataset": None,  # path to an existing manifest dir; None means generate
        "n_identities": 8,
        "n_frames": 64,
        "persons_per_frame": 3,
        "frame_h": 96,
        "frame_w": 160,
        "appearance_parts": 3,
        "n_poses": 4,
        "person_h": 56,
        "person_w": 28,
        "unlabeled_per_frame": 0,
        "gallery_size": 20,
        "n_queries": 16,
        "background_clutter": 0.0,
    },
    "detect": {
        "confidence_threshold": 0.5,
        "nms_iou_threshold": 0.5,
        "gt_match_iou_threshold": 0.6,
        "tau": 0.1,
        "hard_negative_ratio": 0.6,
        "detector": "gt",  # gt | template | file
        "jitter": 0.0,
        "detections": None,  # detections JSON for the file detector
    },
    "memory": {"momentum": 0.5, "new_center_threshold": 0.5},
    "aidq": {"iterations": 500, "dim": 64, "batch_size": 16, "lr": 1.0e-3},
    "gan": {
        "iterations": 10000,
        "batch_pairs": 8,
        "checkpoint_every": 1000,
        "lr_app": 0.003,
        "lr_adam": 1.0e-4,
        "teacher_iterations": 300,
        "warmup_iterations": 300,
        "resume": None,
    },
    "weights": {"recon": 5.0, "id": 1.0, "adv": 1.0, "kl": 1.0, "loc": 0.5, "prim": 1.0},
    "eval": {
        "match_iou": 0.5,
        "gallery_size": None,  # None keeps the protocol's galleries
        "checkpoint": None,
        "embedder": "aidq",  # aidq | gan
    },
    "sweep": {
        "axis": "gallery_size",
        "values": None,  # None selects per-axis defaults
        "repetitions": 1,
        "iterations": 300,  # retrain length for training-axis sweeps
    },
    "synthesize": {"n_ids": 4, "checkpoint": None},
}

# per-profile overrides applied between defaults and the config file
_PROFILE_PRESETS: dict[str, dict[str, Any]] = {
    "toy": {},
    "full": {
        "gan": {"iterations": 100000},
        "aidq": {"iterations": 5000},
    },
    "cuhk": {
        "detect": {"nms_iou_threshold": 0.5, "gt_match_iou_threshold": 0.6},
        "gan": {"iterations": 100000},
        "aidq": {"iterations": 5000},
    },
    "prw": {
        "detect": {"nms_iou_threshold": 0.6, "gt_match_iou_threshold": 0.5},
        "gan": {"iterations": 100000},
        "aidq": {"iterations": 5000},
    },
}

SWEEP_DEFAULT_VALUES = {
    "gallery_size": [10, 20, 50],
    "lambda": [0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0],
    "iou_threshold": [0.3, 0.4, 0.5, 0.6, 0.7],
}


def _deep_merge(base: dict, override: dict, path: str = "") -> dict:
    """Merge override into base, rejecting keys base does not declare."""
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}.{key}" if path else str(key)
        if key not in base:
            raise ConfigError(f"unknown config key: {where}")
        if isinstance(base[key], dict) and isinstance(value, dict):
            out[key] = _deep_merge(base[key], value, where)
        elif isinstance(base[key], dict):
            raise ConfigError(f"config section {where} must be a mapping")
        else:
            out[key] = value
    return out


@dataclass
class RunConfig:
    """Effective configuration with validated per-module objects."""

    raw: dict[str, Any]
    toy_spec: ToySpec
    detector_config: DetectorConfig
    weights: LossWeights
    gan_profile: GanProfile

    @property
    def profile(self) -> str:
        return self.raw["profile"]

    @property
    def seed(self) -> int:
        return self.raw["seed"]

    @property
    def out(self) -> Optional[Path]:
        return Path(self.raw["out"]) if self.raw["out"] else None

    @property
    def crop_h(self) -> int:
        return self.gan_profile.crop_h

    @property
    def crop_w(self) -> int:
        return self.gan_profile.crop_w

    def section(self, name: str) -> dict[str, Any]:
        return self.raw[name]

    def echo(self, out_dir: Path) -> Path:
        """Write the effective config next to the run outputs."""
        out_dir.mkdir(parents=True, exist_ok=True)
        path = out_dir / "config.yaml"
        with open(path, "w") as fh:
            yaml.safe_dump(self.raw, fh, sort_keys=True, default_flow_style=False)
        return path


def _validate(raw: dict[str, Any]) -> RunConfig:
    if raw["profile"] not in PROFILES:
        raise ConfigError(f"profile {raw['profile']!r} not one of {PROFILES}")
    if not isinstance(raw["seed"], int):
        raise ConfigError(f"seed must be an integer, got {raw['seed']!r}")
    data = raw["data"]
    spec_keys = {k: v for k, v in data.items() if k != "dataset"}
    toy_spec = ToySpec(seed=raw["seed"], **{k: v for k, v in spec_keys.items() if k != "seed"})
    d = raw["detect"]
    detector_config = DetectorConfig(
        confidence_threshold=d["confidence_threshold"],
        nms_iou_threshold=d["nms_iou_threshold"],
        gt_match_iou_threshold=d["gt_match_iou_threshold"],
        tau=d["tau"],
        hard_negative_ratio=d["hard_negative_ratio"],
    )
    if d["detector"] not in ("gt", "template", "file"):
        raise ConfigError(f"detector {d['detector']!r} not one of gt/template/file")
    if d["detector"] == "file" and not d["detections"]:
        raise ConfigError("file detector requires detect.detections path")
    if d["jitter"] < 0:
        raise ConfigError("detect.jitter must be >= 0")
    weights = LossWeights(**raw["weights"])
    gan_profile = GanProfile.named("toy" if raw["profile"] == "toy" else "full")
    mem = raw["memory"]
    if not (0.0 <= mem["momentum"] <= 1.0):
        raise ConfigError(f"memory.momentum {mem['momentum']} outside [0, 1]")
    if not (-1.0 < mem["new_center_threshold"] < 1.0):
        raise ConfigError("memory.new_center_threshold outside (-1, 1)")
    for section, key in (
        ("aidq", "iterations"), ("aidq", "dim"), ("aidq", "batch_size"),
        ("gan", "iterations"), ("gan", "batch_pairs"), ("gan", "checkpoint_every"),
        ("gan", "teacher_iterations"), ("sweep", "repetitions"), ("sweep", "iterations"),
        ("synthesize", "n_ids"),
    ):
        if raw[section][key] < 1:
            raise ConfigError(f"{section}.{key} must be >= 1")
    if raw["gan"]["warmup_iterations"] < 0:
        raise ConfigError("gan.warmup_iterations must be >= 0")
    for section, key in (("aidq", "lr"), ("gan", "lr_app"), ("gan", "lr_adam")):
        if raw[section][key] <= 0:
            raise ConfigError(f"{section}.{key} must be > 0")
    ev = raw["eval"]
    if not (0.0 <= ev["match_iou"] <= 1.0):
        raise ConfigError(f"eval.match_iou {ev['match_iou']} outside [0, 1]")
    if ev["gallery_size"] is not None and ev["gallery_size"] < 1:
        raise ConfigError("eval.gallery_size must be >= 1")
    if ev["embedder"] not in ("aidq", "gan"):
        raise ConfigError(f"eval.embedder {ev['embedder']!r} not one of aidq/gan")
    sw = raw["sweep"]
    if sw["axis"] not in SWEEP_DEFAULT_VALUES:
        raise ConfigError(
            f"sweep.axis {sw['axis']!r} not one of {tuple(SWEEP_DEFAULT_VALUES)}"
        )
    return RunConfig(
        raw=raw,
        toy_spec=toy_spec,
        detector_config=detector_config,
        weights=weights,
        gan_profile=gan_profile,
    )


def load_config(
    config_path: Optional[str | Path] = None,
    overrides: Optional[dict[str, Any]] = None,
) -> RunConfig:
    """Layer defaults, profile presets, the config file, and CLI overrides.

    Overrides use top-level keys ("seed", "out", "profile"); the effective
    profile is whichever of override/file/default wins, and its presets apply
    beneath the file's own values.
    """
    file_values: dict[str, Any] = {}
    if config_path is not None:
        with open(config_path) as fh:
            loaded = yaml.safe_load(fh)
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"config file {config_path} must be a mapping")
        file_values = loaded
    overrides = {k: v for k, v in (overrides or {}).items() if v is not None}
    profile = overrides.get("profile") or file_values.get("profile") or DEFAULTS["profile"]
    if profile not in PROFILES:
        raise ConfigError(f"profile {profile!r} not one of {PROFILES}")
    merged = _deep_merge(DEFAULTS, _PROFILE_PRESETS[profile])
    merged = _deep_merge(merged, file_values)
    merged = _deep_merge(merged, overrides)
    merged["profile"] = profile
    return _validate(merged)
