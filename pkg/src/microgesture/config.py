"""Run configuration: section dataclasses, YAML I/O, dotted-key overrides.

A run config has sections data, volume, network, objective, optimizer, fusion
plus a top-level seed. Every run directory receives a frozen fully-resolved
copy (config.yaml) sufficient to reproduce the run bit-identically.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, fields
from pathlib import Path

import yaml

from .heatmaps import VolumeConfig
from .network import NetworkConfig
from .pose_io import ValidationError

DEFAULT_BASE_LR = 0.2 / 3

EMB_SOURCES = ("synthetic",)  # any other value is treated as a file path

SCORE_SPACES = ("softmax", "logits")


class ConfigError(ValueError):
    """Raised for malformed config files or override strings."""


@dataclass(frozen=True)
class DataConfig:
    manifest: str = ""
    train_split: str = "train"
    val_split: str = "val"
    test_split: str = "test"

    def __post_init__(self) -> None:
        for name in ("train_split", "val_split", "test_split"):
            if not getattr(self, name):
                raise ConfigError(f"data.{name} must be non-empty")


@dataclass(frozen=True)
class NetworkSection:
    """Network shape options; in_channels / n_classes come from the dataset."""

    stage_widths: tuple[int, ...] = (64, 128, 512)
    stage_blocks: tuple[int, ...] = (1, 1, 1)
    spatial_strides: tuple[int, ...] | None = None
    stem_width: int = 32
    embed_dim: int = 512
    sem_dim: int = 300
    norm: str = "bn"
    gn_groups: int = 8
    allow_dim_override: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "stage_widths", tuple(int(w) for w in self.stage_widths))
        object.__setattr__(self, "stage_blocks", tuple(int(b) for b in self.stage_blocks))
        if self.spatial_strides is not None:
            object.__setattr__(self, "spatial_strides",
                               tuple(int(s) for s in self.spatial_strides))

    def resolve(self, in_channels: int, n_classes: int) -> NetworkConfig:
        return NetworkConfig(
            in_channels=in_channels,
            stage_widths=self.stage_widths,
            stage_blocks=self.stage_blocks,
            spatial_strides=self.spatial_strides,
            stem_width=self.stem_width,
            embed_dim=self.embed_dim,
            sem_dim=self.sem_dim,
            n_classes=n_classes,
            norm=self.norm,
            gn_groups=self.gn_groups,
            allow_dim_override=self.allow_dim_override,
        )


@dataclass(frozen=True)
class ObjectiveConfig:
    alpha: float = 20.0
    emb_loss_reduction: str = "sum"
    embeddings: str = "synthetic"
    embedding_dim: int = 300

    def __post_init__(self) -> None:
        if self.alpha < 0:
            raise ConfigError(f"objective.alpha must be >= 0, got {self.alpha}")
        if self.emb_loss_reduction not in ("sum", "mean"):
            raise ConfigError(f"objective.emb_loss_reduction must be sum or mean, "
                              f"got {self.emb_loss_reduction!r}")
        if not self.embeddings:
            raise ConfigError("objective.embeddings must be 'synthetic' or a file path")
        if self.embedding_dim < 1:
            raise ConfigError(f"objective.embedding_dim must be >= 1, got {self.embedding_dim}")


@dataclass(frozen=True)
class OptimizerConfig:
    base_lr: float = DEFAULT_BASE_LR
    momentum: float = 0.9
    weight_decay: float = 3e-4
    batch_size: int = 32
    epochs: int = 100
    early_stop_train_top1: float | None = None

    def __post_init__(self) -> None:
        if not self.base_lr > 0:
            raise ConfigError(f"optimizer.base_lr must be positive, got {self.base_lr}")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"optimizer.momentum must be in [0,1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ConfigError(f"optimizer.weight_decay must be >= 0, got {self.weight_decay}")
        if self.batch_size < 1:
            raise ConfigError(f"optimizer.batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ConfigError(f"optimizer.epochs must be >= 1, got {self.epochs}")
        if self.early_stop_train_top1 is not None and not 0 < self.early_stop_train_top1 <= 1:
            raise ConfigError("optimizer.early_stop_train_top1 must be in (0,1] or null")


@dataclass(frozen=True)
class FusionConfig:
    weight_joint: float = 2.0
    weight_limb: float = 3.0
    score_space: str = "softmax"

    def __post_init__(self) -> None:
        if self.weight_joint < 0 or self.weight_limb < 0:
            raise ConfigError("fusion weights must be >= 0")
        if self.weight_joint == 0 and self.weight_limb == 0:
            raise ConfigError("fusion weights must not both be 0")
        if self.score_space not in SCORE_SPACES:
            raise ConfigError(f"fusion.score_space must be one of {SCORE_SPACES}, "
                              f"got {self.score_space!r}")


@dataclass(frozen=True)
class RunConfig:
    data: DataConfig
    volume: VolumeConfig
    network: NetworkSection
    objective: ObjectiveConfig
    optimizer: OptimizerConfig
    fusion: FusionConfig
    seed: int = 0

    def __post_init__(self) -> None:
        if self.seed < 0:
            raise ConfigError(f"seed must be >= 0, got {self.seed}")
        if self.objective.embedding_dim != self.network.sem_dim:
            raise ConfigError(
                f"objective.embedding_dim ({self.objective.embedding_dim}) must equal "
                f"network.sem_dim ({self.network.sem_dim})")


_SECTION_TYPES = {
    "data": DataConfig,
    "volume": VolumeConfig,
    "network": NetworkSection,
    "objective": ObjectiveConfig,
    "optimizer": OptimizerConfig,
    "fusion": FusionConfig,
}


def _build_section(name: str, cls, data: dict):
    if not isinstance(data, dict):
        raise ConfigError(f"section {name!r} must be a mapping, got {type(data).__name__}")
    known = {f.name for f in fields(cls)}
    extra = sorted(set(data) - known)
    if extra:
        raise ConfigError(f"unknown keys in section {name!r}: {extra}")
    kwargs = {}
    for key, value in data.items():
        if isinstance(value, list):
            value = tuple(value)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except (ValidationError, TypeError) as exc:
        raise ConfigError(f"section {name!r}: {exc}") from exc


def run_config_from_dict(data: dict) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError(f"config root must be a mapping, got {type(data).__name__}")
    extra = sorted(set(data) - set(_SECTION_TYPES) - {"seed"})
    if extra:
        raise ConfigError(f"unknown top-level config keys: {extra}")
    sections = {name: _build_section(name, cls, data.get(name, {}) or {})
                for name, cls in _SECTION_TYPES.items()}
    seed = data.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool):
        raise ConfigError(f"seed must be an integer, got {seed!r}")
    return RunConfig(seed=seed, **sections)


def _plain(value):
    if isinstance(value, tuple):
        return [_plain(v) for v in value]
    if isinstance(value, Path):
        return str(value)
    return value


def run_config_to_dict(config: RunConfig) -> dict:
    out: dict = {"seed": config.seed}
    for name, cls in _SECTION_TYPES.items():
        section = getattr(config, name)
        out[name] = {f.name: _plain(getattr(section, f.name)) for f in fields(cls)}
    return out


def load_config_data(path) -> dict:
    """Read a YAML config file into a plain dict (no validation yet)."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid YAML in {path}: {exc}") from exc
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"config root in {path} must be a mapping")
    return data


def load_run_config(path) -> RunConfig:
    return run_config_from_dict(load_config_data(path))


def dump_run_config(config: RunConfig, path) -> None:
    data = run_config_to_dict(config)
    Path(path).write_text(yaml.safe_dump(data, sort_keys=True, default_flow_style=False),
                          encoding="utf-8")


def apply_overrides(data: dict, overrides) -> dict:
    """Apply dotted-key overrides (e.g. objective.alpha=30) to a config dict.

    Values are parsed as YAML scalars. Every key path must already exist in
    the template (section defaults are merged first), so typos fail loudly.
    """
    merged = run_config_to_dict(run_config_from_dict(data))
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"override must look like section.key=value, got {item!r}")
        try:
            value = yaml.safe_load(raw) if raw != "" else ""
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse override value {raw!r}: {exc}") from exc
        parts = key.split(".")
        node = merged
        for part in parts[:-1]:
            if not isinstance(node, dict) or part not in node:
                raise ConfigError(f"unknown config key {key!r}")
            node = node[part]
        if not isinstance(node, dict) or parts[-1] not in node:
            raise ConfigError(f"unknown config key {key!r}")
        node[parts[-1]] = value
    return merged


def config_hash(config: RunConfig) -> str:
    """Stable short hash of the fully-resolved config, for resume checks."""
    canon = json.dumps(run_config_to_dict(config), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:16]


def desk_config_dict() -> dict:
    """Small CPU-friendly profile; resolution and depth cut far below the full profile."""
    return {
        "seed": 0,
        "data": {"manifest": ""},
        "volume": {"height": 16, "width": 16, "frames": 4, "sigma": 0.6,
                   "modality": "joint", "crop_padding": 0.1},
        "network": {"stage_widths": [16, 32, 512], "stage_blocks": [1, 1, 1],
                    "stem_width": 8},
        # mean reduction keeps the embedding-head curvature ~alpha*||Z||^2/300,
        # stable at the default lr; the sum default diverges at desk scale.
        "objective": {"alpha": 20.0, "emb_loss_reduction": "mean"},
        "optimizer": {"base_lr": DEFAULT_BASE_LR, "momentum": 0.9, "weight_decay": 3e-4,
                      "batch_size": 8, "epochs": 30},
        "fusion": {"weight_joint": 2.0, "weight_limb": 3.0},
    }


def full_config_dict() -> dict:
    """Full-scale training profile: 100 epochs, batch 32, lr 0.2/3, alpha 20."""
    return {
        "seed": 0,
        "data": {"manifest": ""},
        "volume": {"height": 56, "width": 56, "frames": 16, "sigma": 0.6,
                   "modality": "joint", "crop_padding": 0.1},
        "network": {"stage_widths": [64, 128, 512], "stage_blocks": [2, 2, 2],
                    "stem_width": 32},
        "objective": {"alpha": 20.0},
        "optimizer": {"base_lr": DEFAULT_BASE_LR, "momentum": 0.9, "weight_decay": 3e-4,
                      "batch_size": 32, "epochs": 100},
        "fusion": {"weight_joint": 2.0, "weight_limb": 3.0},
    }


PRESETS = {"desk": desk_config_dict, "full": full_config_dict}


def preset_config_dict(name: str) -> dict:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return PRESETS[name]()
