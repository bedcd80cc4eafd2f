"""Run configuration: strict YAML schema, dotted overrides, content hashing.

A config file is a single YAML mapping with sections ``model``, ``train``,
``sampler``, ``data``, ``metrics``, ``analysis`` and a top-level ``seed``.
Unknown keys anywhere are rejected. The config hash is the SHA-256 of the
canonical JSON of the fully resolved tree, so it changes iff a semantic
field changes.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import yaml

from .dataset import DataConfig
from .errors import ConfigError
from .network import ModelConfig
from .sampling import SamplerConfig
from .training import TrainConfig

DEFAULTS: dict = {
    "seed": 0,
    "model": {
        "input_size": 64,
        "base_channels": 32,
        "channel_multipliers": [1, 2, 4],
        "attention_levels": [2, 3],
        "num_res_blocks_per_level": 2,
        "dropout": 0.1,
        "fused_width_per_level": None,
        "single_task_mri_cond": False,
        "task2": {"enabled": True},
        "hff": {"enabled": True},
        "decoders": {"shared_single": False, "asymmetric_dropout": None},
    },
    "train": {
        "epochs": 100,
        "learning_rate": 1.0e-4,
        "batch_size": 8,
        "T": 1000,
        "mri_availability": 1.0,
        "schedule_kind": "cosine",
        "max_steps": None,
        "checkpoint_every": 500,
        "log_every": 1,
    },
    "sampler": {"steps": 1000, "mri_active": True, "clip_x0": True, "batch_size": 16},
    "data": {
        "subjects": 20,
        "shape": [64, 64, 64],
        "train_fraction": 0.8,
        "drf": 100.0,
        "total_counts": 500000,
        "n_angles": 60,
        "mlem_iters": 30,
        "orientations": ["axial"],
        "slices_per_subject": 16,
        "lesion_probability": 0.5,
    },
    "metrics": {"featurizer_seed": 0},
    "analysis": {"layers": None, "max_samples": 64, "timestep": None, "capture_seed": 0},
}


@dataclass(frozen=True)
class MetricsConfig:
    featurizer_seed: int = 0


@dataclass(frozen=True)
class AnalysisConfig:
    layers: tuple[str, ...] | None = None
    max_samples: int = 64
    timestep: int | None = None
    capture_seed: int = 0


@dataclass(frozen=True)
class RunConfig:
    seed: int
    model: ModelConfig
    train: TrainConfig
    sampler: SamplerConfig
    sampler_batch_size: int
    data: DataConfig
    metrics: MetricsConfig
    analysis: AnalysisConfig
    resolved: dict
    config_hash: str


def _merge(defaults: dict, user: dict, path: str = "") -> dict:
    out = copy.deepcopy(defaults)
    for key, value in user.items():
        where = f"{path}.{key}" if path else key
        if key not in defaults:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(defaults[key], dict) and defaults[key]:
            if not isinstance(value, dict):
                raise ConfigError(f"config key {where!r} must be a mapping")
            out[key] = _merge(defaults[key], value, where)
        else:
            out[key] = value
    return out


def _apply_override(tree: dict, key: str, raw_value: str) -> None:
    parts = key.split(".")
    node = tree
    for i, part in enumerate(parts[:-1]):
        if not isinstance(node, dict) or part not in node:
            raise ConfigError(f"unknown override path {'.'.join(parts[: i + 1])!r}")
        node = node[part]
    leaf = parts[-1]
    if not isinstance(node, dict) or leaf not in node:
        raise ConfigError(f"unknown override path {key!r}")
    if isinstance(node[leaf], dict) and node[leaf]:
        raise ConfigError(f"override path {key!r} names a section, not a value")
    try:
        node[leaf] = yaml.safe_load(raw_value)
    except yaml.YAMLError as e:
        raise ConfigError(f"cannot parse override value for {key!r}: {e}") from e


def config_hash(resolved: dict) -> str:
    canon = json.dumps(resolved, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()


def load_config(
    path: str | Path | None = None,
    overrides: list[str] | None = None,
    seed: int | None = None,
) -> RunConfig:
    """Load, merge, override, validate, and hash a run configuration."""
    user: dict = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        try:
            user = yaml.safe_load(p.read_text()) or {}
        except yaml.YAMLError as e:
            raise ConfigError(f"invalid YAML in {p}: {e}") from e
        if not isinstance(user, dict):
            raise ConfigError(f"config root must be a mapping, got {type(user).__name__}")

    tree = _merge(DEFAULTS, user)
    for ov in overrides or []:
        if "=" not in ov:
            raise ConfigError(f"override must look like key=value, got {ov!r}")
        k, v = ov.split("=", 1)
        _apply_override(tree, k.strip(), v)
    if seed is not None:
        tree["seed"] = seed

    return resolve(tree)


def resolve(tree: dict) -> RunConfig:
    """Build the typed configs from a resolved tree."""
    try:
        m = tree["model"]
        model = ModelConfig(
            input_size=int(m["input_size"]),
            base_channels=int(m["base_channels"]),
            channel_multipliers=tuple(m["channel_multipliers"]),
            attention_levels=frozenset(m["attention_levels"]),
            num_res_blocks_per_level=int(m["num_res_blocks_per_level"]),
            dropout=float(m["dropout"]),
            fused_width_per_level=(
                tuple(m["fused_width_per_level"]) if m["fused_width_per_level"] else None
            ),
            task2_enabled=bool(m["task2"]["enabled"]),
            hff_enabled=bool(m["hff"]["enabled"]),
            shared_single_decoder=bool(m["decoders"]["shared_single"]),
            mri_decoder_dropout=(
                None
                if m["decoders"]["asymmetric_dropout"] is None
                else float(m["decoders"]["asymmetric_dropout"])
            ),
            single_task_mri_cond=bool(m["single_task_mri_cond"]),
        )
        t = tree["train"]
        train = TrainConfig(
            epochs=int(t["epochs"]),
            learning_rate=float(t["learning_rate"]),
            batch_size=int(t["batch_size"]),
            T=int(t["T"]),
            mri_availability=float(t["mri_availability"]),
            seed=int(tree["seed"]),
            schedule_kind=str(t["schedule_kind"]),
            max_steps=None if t["max_steps"] is None else int(t["max_steps"]),
            checkpoint_every=int(t["checkpoint_every"]),
            log_every=int(t["log_every"]),
        )
        s = tree["sampler"]
        sampler = SamplerConfig(
            steps=int(s["steps"]),
            seed=int(tree["seed"]),
            mri_active=bool(s["mri_active"]),
            clip_x0=bool(s["clip_x0"]),
        )
        d = tree["data"]
        data = DataConfig(
            subjects=int(d["subjects"]),
            shape=tuple(int(x) for x in d["shape"]),
            train_fraction=float(d["train_fraction"]),
            drf=float(d["drf"]),
            total_counts=int(d["total_counts"]),
            n_angles=int(d["n_angles"]),
            mlem_iters=int(d["mlem_iters"]),
            orientations=tuple(d["orientations"]),
            slices_per_subject=int(d["slices_per_subject"]),
            lesion_probability=float(d["lesion_probability"]),
            seed=int(tree["seed"]),
        )
        metrics = MetricsConfig(featurizer_seed=int(tree["metrics"]["featurizer_seed"]))
        a = tree["analysis"]
        analysis = AnalysisConfig(
            layers=tuple(a["layers"]) if a["layers"] else None,
            max_samples=int(a["max_samples"]),
            timestep=None if a["timestep"] is None else int(a["timestep"]),
            capture_seed=int(a["capture_seed"]),
        )
    except (KeyError, TypeError, ValueError) as e:
        raise ConfigError(f"invalid configuration: {e}") from e

    return RunConfig(
        seed=int(tree["seed"]),
        model=model,
        train=train,
        sampler=sampler,
        sampler_batch_size=int(tree["sampler"]["batch_size"]),
        data=data,
        metrics=metrics,
        analysis=analysis,
        resolved=tree,
        config_hash=config_hash(tree),
    )


def dump_resolved(cfg: RunConfig, path: str | Path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.resolved, sort_keys=True))
