"""3D-CNN backbone over heatmap volumes with classification and semantic heads.

Slow-pathway convention: a spatial-only convolution stem, residual stages that
downsample space but never time, global average pooling into a feature vector
Z, then two affine heads producing class logits and a word-embedding
projection Z_emb. Early stages use purely spatial kernels; later stages use a
temporal extent of 3.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
import torch
from torch import nn

from .pose_io import ValidationError

EMBED_DIM = 512
SEM_DIM = 300

NORM_KINDS = ("bn", "gn")

CHECKPOINT_FORMAT = "microgesture-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class NetworkConfig:
    """Backbone/head shape description.

    The final stage width must equal embed_dim. embed_dim and sem_dim are
    pinned to 512 and 300 unless allow_dim_override is set (used by tiny test
    networks where the full-size heads would dominate the parameter count).
    """

    in_channels: int
    stage_widths: tuple[int, ...] = (64, 128, 512)
    stage_blocks: tuple[int, ...] = (1, 1, 1)
    spatial_strides: tuple[int, ...] | None = None
    stem_width: int = 32
    embed_dim: int = EMBED_DIM
    sem_dim: int = SEM_DIM
    n_classes: int = 2
    norm: str = "bn"
    gn_groups: int = 8
    allow_dim_override: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "stage_widths", tuple(int(w) for w in self.stage_widths))
        object.__setattr__(self, "stage_blocks", tuple(int(b) for b in self.stage_blocks))
        strides = self.spatial_strides
        if strides is None:
            strides = (2,) * len(self.stage_widths)
        object.__setattr__(self, "spatial_strides", tuple(int(s) for s in strides))
        if self.in_channels < 1:
            raise ValidationError(f"in_channels must be >= 1, got {self.in_channels}")
        if self.n_classes < 2:
            raise ValidationError(f"n_classes must be >= 2, got {self.n_classes}")
        if not self.stage_widths:
            raise ValidationError("need at least one stage")
        if len(self.stage_blocks) != len(self.stage_widths):
            raise ValidationError("stage_blocks and stage_widths length mismatch")
        if len(self.spatial_strides) != len(self.stage_widths):
            raise ValidationError("spatial_strides and stage_widths length mismatch")
        if any(w < 1 for w in self.stage_widths) or any(b < 1 for b in self.stage_blocks):
            raise ValidationError("stage widths and block counts must be >= 1")
        if any(s < 1 for s in self.spatial_strides):
            raise ValidationError("spatial strides must be >= 1")
        if self.stem_width < 1:
            raise ValidationError(f"stem_width must be >= 1, got {self.stem_width}")
        if self.stage_widths[-1] != self.embed_dim:
            raise ValidationError(
                f"final stage width {self.stage_widths[-1]} must equal embed_dim {self.embed_dim}")
        if not self.allow_dim_override and (self.embed_dim, self.sem_dim) != (EMBED_DIM, SEM_DIM):
            raise ValidationError(
                f"embed_dim/sem_dim are fixed at {EMBED_DIM}/{SEM_DIM}; "
                "set allow_dim_override for reduced test networks")
        if self.embed_dim < 1 or self.sem_dim < 1:
            raise ValidationError("embed_dim and sem_dim must be >= 1")
        if self.norm not in NORM_KINDS:
            raise ValidationError(f"norm must be one of {NORM_KINDS}, got {self.norm!r}")
        if self.norm == "gn":
            if self.gn_groups < 1:
                raise ValidationError(f"gn_groups must be >= 1, got {self.gn_groups}")
            for w in (self.stem_width, *self.stage_widths):
                if w % self.gn_groups:
                    raise ValidationError(f"width {w} not divisible by gn_groups {self.gn_groups}")


def network_config_to_dict(config: NetworkConfig) -> dict:
    return {
        "in_channels": config.in_channels,
        "stage_widths": list(config.stage_widths),
        "stage_blocks": list(config.stage_blocks),
        "spatial_strides": list(config.spatial_strides),
        "stem_width": config.stem_width,
        "embed_dim": config.embed_dim,
        "sem_dim": config.sem_dim,
        "n_classes": config.n_classes,
        "norm": config.norm,
        "gn_groups": config.gn_groups,
        "allow_dim_override": config.allow_dim_override,
    }


def network_config_from_dict(data: dict) -> NetworkConfig:
    known = {f for f in NetworkConfig.__dataclass_fields__}
    extra = set(data) - known
    if extra:
        raise ValidationError(f"unknown network config keys: {sorted(extra)}")
    if "in_channels" not in data:
        raise ValidationError("network config missing in_channels")
    return NetworkConfig(**data)


class ForwardOutput(NamedTuple):
    logits: torch.Tensor
    z: torch.Tensor
    z_emb: torch.Tensor


def _make_norm(config: NetworkConfig, width: int) -> nn.Module:
    if config.norm == "gn":
        return nn.GroupNorm(config.gn_groups, width)
    return nn.BatchNorm3d(width)


class BasicBlock3d(nn.Module):
    """Two-conv residual block; spatial stride on the first conv only."""

    def __init__(self, config: NetworkConfig, in_width: int, out_width: int,
                 spatial_stride: int, temporal_kernel: int) -> None:
        super().__init__()
        kt, pt = temporal_kernel, temporal_kernel // 2
        stride = (1, spatial_stride, spatial_stride)
        self.conv1 = nn.Conv3d(in_width, out_width, (kt, 3, 3), stride=stride,
                               padding=(pt, 1, 1), bias=False)
        self.norm1 = _make_norm(config, out_width)
        self.conv2 = nn.Conv3d(out_width, out_width, (kt, 3, 3), padding=(pt, 1, 1), bias=False)
        self.norm2 = _make_norm(config, out_width)
        self.relu = nn.ReLU(inplace=True)
        if in_width != out_width or spatial_stride != 1:
            self.shortcut: nn.Module = nn.Sequential(
                nn.Conv3d(in_width, out_width, 1, stride=stride, bias=False),
                _make_norm(config, out_width),
            )
        else:
            self.shortcut = nn.Identity()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = self.relu(self.norm1(self.conv1(x)))
        out = self.norm2(self.conv2(out))
        return self.relu(out + self.shortcut(x))


class MicroGestureNet(nn.Module):
    """Backbone + pooling + (classifier, semantic projection) heads."""

    def __init__(self, config: NetworkConfig) -> None:
        super().__init__()
        self.config = config
        self.stem = nn.Sequential(
            nn.Conv3d(config.in_channels, config.stem_width, (1, 5, 5),
                      padding=(0, 2, 2), bias=False),
            _make_norm(config, config.stem_width),
            nn.ReLU(inplace=True),
        )
        stages = []
        in_width = config.stem_width
        for i, (width, blocks, stride) in enumerate(
                zip(config.stage_widths, config.stage_blocks, config.spatial_strides)):
            kt = 1 if i == 0 else 3
            layers = [BasicBlock3d(config, in_width, width, stride, kt)]
            layers += [BasicBlock3d(config, width, width, 1, kt) for _ in range(blocks - 1)]
            stages.append(nn.Sequential(*layers))
            in_width = width
        self.stages = nn.Sequential(*stages)
        self.classifier = nn.Linear(config.embed_dim, config.n_classes)
        self.projection = nn.Linear(config.embed_dim, config.sem_dim)

    def forward(self, volumes: torch.Tensor) -> ForwardOutput:
        if volumes.dim() == 4:
            volumes = volumes.unsqueeze(0)
        if volumes.dim() != 5:
            raise ValidationError(f"expected (B,C,T,H,W) input, got shape {tuple(volumes.shape)}")
        if volumes.shape[1] != self.config.in_channels:
            raise ValidationError(
                f"volume has {volumes.shape[1]} channels, network expects {self.config.in_channels}")
        feats = self.stages(self.stem(volumes))
        z = feats.mean(dim=(2, 3, 4))
        return ForwardOutput(logits=self.classifier(z), z=z, z_emb=self.projection(z))


def init_params(config: NetworkConfig, seed: int) -> MicroGestureNet:
    """Build a network with deterministic fan-in-scaled init (zero biases)."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed & 0x7FFFFFFFFFFFFFFF)
        model = MicroGestureNet(config)  # constructors also draw from the RNG
        for module in model.modules():
            if isinstance(module, (nn.Conv3d, nn.Linear)):
                nn.init.kaiming_normal_(module.weight, mode="fan_in", nonlinearity="relu")
                if module.bias is not None:
                    nn.init.zeros_(module.bias)
            elif isinstance(module, (nn.BatchNorm3d, nn.GroupNorm)):
                nn.init.ones_(module.weight)
                nn.init.zeros_(module.bias)
                if isinstance(module, nn.BatchNorm3d):
                    module.reset_running_stats()
    return model


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def predict_scores(logits) -> np.ndarray:
    """Softmax with max-subtraction; rows sum to 1 and are strictly positive."""
    if isinstance(logits, torch.Tensor):
        arr = logits.detach().cpu().numpy().astype(np.float64)
    else:
        arr = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValidationError("logits must be finite")
    shifted = arr - arr.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class Checkpoint:
    """In-memory image of a checkpoint file."""

    config: NetworkConfig
    params: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray]
    momentum: dict[str, np.ndarray] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)


def _to_f4(value: torch.Tensor | np.ndarray) -> np.ndarray:
    arr = value.detach().cpu().numpy() if isinstance(value, torch.Tensor) else np.asarray(value)
    if arr.dtype.kind == "f":
        arr = arr.astype("<f4", copy=False)
    # np.array (not ascontiguousarray) so 0-d buffers keep their shape
    return np.array(arr, order="C", copy=True)


def save_checkpoint(path, model: MicroGestureNet, *,
                    momentum: dict | None = None, meta: dict | None = None) -> None:
    """Write an .npz checkpoint: meta JSON + param/, buffer/, momentum/ arrays."""
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "network": network_config_to_dict(model.config),
        "meta": dict(meta or {}),
    }
    arrays: dict[str, np.ndarray] = {
        "meta": np.frombuffer(json.dumps(header, sort_keys=True).encode("utf-8"), dtype=np.uint8).copy()
    }
    for name, p in model.named_parameters():
        arrays[f"param/{name}"] = _to_f4(p)
    for name, b in model.named_buffers():
        arrays[f"buffer/{name}"] = _to_f4(b)
    for name, m in (momentum or {}).items():
        arrays[f"momentum/{name}"] = _to_f4(m)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path) -> Checkpoint:
    with np.load(path) as data:
        if "meta" not in data:
            raise ValidationError(f"{path}: not a checkpoint file (missing meta)")
        header = json.loads(bytes(data["meta"]).decode("utf-8"))
        if header.get("format") != CHECKPOINT_FORMAT:
            raise ValidationError(f"{path}: unrecognized checkpoint format {header.get('format')!r}")
        if header.get("version") != CHECKPOINT_VERSION:
            raise ValidationError(f"{path}: unsupported checkpoint version {header.get('version')!r}")
        groups: dict[str, dict[str, np.ndarray]] = {"param": {}, "buffer": {}, "momentum": {}}
        for key in data.files:
            if key == "meta":
                continue
            prefix, _, name = key.partition("/")
            if prefix not in groups or not name:
                raise ValidationError(f"{path}: unexpected checkpoint key {key!r}")
            groups[prefix][name] = data[key]
    return Checkpoint(config=network_config_from_dict(header["network"]),
                      params=groups["param"], buffers=groups["buffer"],
                      momentum=groups["momentum"], meta=header["meta"])


def apply_checkpoint(model: MicroGestureNet, ckpt: Checkpoint) -> None:
    """Copy checkpoint arrays into an existing model (shapes must match)."""
    own_params = dict(model.named_parameters())
    own_buffers = dict(model.named_buffers())
    if set(own_params) != set(ckpt.params):
        raise ValidationError("checkpoint parameter names do not match the model")
    if set(own_buffers) != set(ckpt.buffers):
        raise ValidationError("checkpoint buffer names do not match the model")
    with torch.no_grad():
        for kind, source, dest in (("parameter", ckpt.params, own_params),
                                   ("buffer", ckpt.buffers, own_buffers)):
            for name, tensor in dest.items():
                arr = source[name]
                if tuple(arr.shape) != tuple(tensor.shape):
                    raise ValidationError(f"shape mismatch for {kind} {name}")
                tensor.copy_(torch.from_numpy(np.array(arr, order="C")).to(tensor.dtype))


def model_from_checkpoint(ckpt: Checkpoint) -> MicroGestureNet:
    model = MicroGestureNet(ckpt.config)
    apply_checkpoint(model, ckpt)
    return model
