"""Pseudo-3D heatmap volumes from 2D skeleton clips.

Pipeline: subject-centered crop -> uniform temporal sampling -> per-frame
gaussian heatmaps (joint or limb modality) stacked into a C x T x H x W
volume.

Pixel convention, shared with the tests' brute-force oracle: pixel (i, j)
samples the continuous point (j + 0.5, i + 0.5) in a W x H canvas, and
unit-square keypoint coordinates scale to pixels as (x * W, y * H).
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .pose_io import KeypointLayout, SkeletonClip, ValidationError

MODALITIES = ("joint", "limb")
_VOLUME_HEADER = struct.Struct("<4I")  # C, T, H, W


@dataclass(frozen=True)
class VolumeConfig:
    """Geometry and rendering settings for heatmap volumes."""

    height: int = 56
    width: int = 56
    frames: int = 16
    sigma: float = 0.6
    modality: str = "joint"
    crop_padding: float = 0.1

    def __post_init__(self):
        if self.height < 1 or self.width < 1 or self.frames < 1:
            raise ValidationError(f"volume dims must be >= 1, got {self.height}x{self.width}x{self.frames}")
        if not self.sigma > 0:
            raise ValidationError(f"sigma must be > 0, got {self.sigma}")
        if self.crop_padding < 0:
            raise ValidationError(f"crop_padding must be >= 0, got {self.crop_padding}")
        if self.modality not in MODALITIES:
            raise ValidationError(f"modality must be one of {MODALITIES}, got {self.modality!r}")


@dataclass(frozen=True, eq=False)
class HeatmapVolume:
    """Dense (C, T, H, W) float32 volume with values in [0, 1]."""

    data: np.ndarray
    modality: str

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return tuple(self.data.shape)


def channel_count(layout: KeypointLayout, modality: str) -> int:
    if modality == "joint":
        return layout.num_joints
    if modality == "limb":
        return layout.num_limbs
    raise ValidationError(f"modality must be one of {MODALITIES}, got {modality!r}")


def uniform_sample_indices(t_in: int, t_out: int, mode: str = "test", seed: int | None = None) -> np.ndarray:
    """Pick t_out frame indices by splitting [0, t_in) into equal segments.

    Test mode takes the floor of each segment midpoint; train mode draws
    uniformly within each segment (deterministic per seed). Indices are
    non-decreasing and in [0, t_in); t_in < t_out just yields repeats.
    """
    if t_in < 1 or t_out < 1:
        raise ValidationError(f"t_in and t_out must be >= 1, got {t_in}, {t_out}")
    seg = t_in / t_out
    if mode == "test":
        pos = (np.arange(t_out) + 0.5) * seg
    elif mode == "train":
        rng = np.random.default_rng(seed)
        pos = (np.arange(t_out) + rng.random(t_out)) * seg
    else:
        raise ValidationError(f"mode must be 'train' or 'test', got {mode!r}")
    return np.minimum(pos.astype(np.int64), t_in - 1)


def subject_centered_crop(clip: SkeletonClip, padding: float) -> tuple[SkeletonClip, np.ndarray]:
    """Remap keypoints so their tight bounding box fills the unit square.

    The box is taken over all confidence>0 keypoints in all frames, expanded
    on each side by `padding` times its extent. A degenerate box (zero width
    or height) is widened to a 1-pixel extent centered on the box before
    padding. Returns the remapped clip and the 2x3 affine that was applied.
    """
    frames = clip.frames
    mask = frames[:, :, 2] > 0
    if not mask.any():
        raise ValidationError(f"clip {clip.clip_id!r}: empty skeleton (all confidences are 0)")
    xs = frames[:, :, 0][mask]
    ys = frames[:, :, 1][mask]
    x_min, x_max = xs.min(), xs.max()
    y_min, y_max = ys.min(), ys.max()
    if x_max - x_min == 0.0:
        x_min, x_max = x_min - 0.5, x_max + 0.5
    if y_max - y_min == 0.0:
        y_min, y_max = y_min - 0.5, y_max + 0.5
    pad_x = padding * (x_max - x_min)
    pad_y = padding * (y_max - y_min)
    x0, bw = x_min - pad_x, (x_max - x_min) + 2.0 * pad_x
    y0, bh = y_min - pad_y, (y_max - y_min) + 2.0 * pad_y

    affine = np.array([[1.0 / bw, 0.0, -x0 / bw], [0.0, 1.0 / bh, -y0 / bh]], dtype=np.float64)
    out = frames.copy()
    out[:, :, 0] = (frames[:, :, 0] - x0) / bw
    out[:, :, 1] = (frames[:, :, 1] - y0) / bh
    cropped = SkeletonClip(
        clip_id=clip.clip_id, subject_id=clip.subject_id, label_id=clip.label_id, frames=out
    )
    return cropped, affine


def _pixel_grid(height: int, width: int) -> tuple[np.ndarray, np.ndarray]:
    ys = np.arange(height, dtype=np.float64) + 0.5
    xs = np.arange(width, dtype=np.float64) + 0.5
    return ys, xs


def joint_heatmap_frame(kpts: np.ndarray, height: int, width: int, sigma: float) -> np.ndarray:
    """One gaussian per keypoint, peak value = its confidence.

    kpts is (K, 3) with coordinates in the unit square; returns (K, H, W).
    """
    kpts = np.asarray(kpts, dtype=np.float64)
    ys, xs = _pixel_grid(height, width)
    px = kpts[:, 0] * width
    py = kpts[:, 1] * height
    conf = kpts[:, 2]
    dx2 = (xs[None, :] - px[:, None]) ** 2  # (K, W)
    dy2 = (ys[None, :] - py[:, None]) ** 2  # (K, H)
    out = np.exp(-(dy2[:, :, None] + dx2[:, None, :]) / (2.0 * sigma * sigma))
    return conf[:, None, None] * out


def limb_heatmap_frame(
    kpts: np.ndarray, limb_pairs: tuple[tuple[int, int], ...], height: int, width: int, sigma: float
) -> np.ndarray:
    """One gaussian ridge per limb: distance to the segment between its
    endpoints, weighted by the smaller endpoint confidence. Returns (L, H, W)."""
    kpts = np.asarray(kpts, dtype=np.float64)
    ys, xs = _pixel_grid(height, width)
    gx, gy = np.meshgrid(xs, ys)  # (H, W)
    out = np.empty((len(limb_pairs), height, width), dtype=np.float64)
    for idx, (a, b) in enumerate(limb_pairs):
        ax, ay = kpts[a, 0] * width, kpts[a, 1] * height
        bx, by = kpts[b, 0] * width, kpts[b, 1] * height
        weight = min(kpts[a, 2], kpts[b, 2])
        sx, sy = bx - ax, by - ay
        seg_len2 = sx * sx + sy * sy
        if seg_len2 == 0.0:
            d2 = (gx - ax) ** 2 + (gy - ay) ** 2
        else:
            t = np.clip(((gx - ax) * sx + (gy - ay) * sy) / seg_len2, 0.0, 1.0)
            d2 = (gx - (ax + t * sx)) ** 2 + (gy - (ay + t * sy)) ** 2
        out[idx] = weight * np.exp(-d2 / (2.0 * sigma * sigma))
    return out


def build_volume(
    clip: SkeletonClip,
    layout: KeypointLayout,
    config: VolumeConfig,
    mode: str = "test",
    seed: int | None = None,
) -> HeatmapVolume:
    """Crop, sample config.frames frames, and render per-frame heatmaps."""
    if clip.num_joints != layout.num_joints:
        raise ValidationError(
            f"clip {clip.clip_id!r}: has {clip.num_joints} joints, layout expects {layout.num_joints}"
        )
    cropped, _ = subject_centered_crop(clip, config.crop_padding)
    indices = uniform_sample_indices(clip.num_frames, config.frames, mode=mode, seed=seed)
    c_out = channel_count(layout, config.modality)
    data = np.empty((c_out, config.frames, config.height, config.width), dtype=np.float32)
    for out_t, src_t in enumerate(indices):
        kpts = cropped.frames[src_t]
        if config.modality == "joint":
            frame = joint_heatmap_frame(kpts, config.height, config.width, config.sigma)
        else:
            frame = limb_heatmap_frame(kpts, layout.limb_pairs, config.height, config.width, config.sigma)
        data[:, out_t] = frame.astype(np.float32)
    data.setflags(write=False)
    return HeatmapVolume(data=data, modality=config.modality)


# ---------------------------------------------------------------------------
# Volume dump formats
# ---------------------------------------------------------------------------

def write_volume(volume: HeatmapVolume, path: str | Path) -> None:
    """Flat little-endian float32 dump with a 16-byte C,T,H,W header."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    c, t, h, w = volume.data.shape
    with open(path, "wb") as fh:
        fh.write(_VOLUME_HEADER.pack(c, t, h, w))
        fh.write(np.ascontiguousarray(volume.data, dtype="<f4").tobytes())


def read_volume(path: str | Path) -> np.ndarray:
    with open(path, "rb") as fh:
        header = fh.read(_VOLUME_HEADER.size)
        if len(header) != _VOLUME_HEADER.size:
            raise ValidationError(f"{path}: truncated volume header")
        c, t, h, w = _VOLUME_HEADER.unpack(header)
        payload = fh.read()
    if len(payload) != 4 * c * t * h * w:
        raise ValidationError(
            f"{path}: expected {4 * c * t * h * w} payload bytes, got {len(payload)}")
    data = np.frombuffer(payload, dtype="<f4")
    return data.reshape(c, t, h, w).astype(np.float32)


def frame_grid(volume: HeatmapVolume, frame: int, pad: int = 1) -> np.ndarray:
    """Tile one frame's channels into a uint8 grayscale grid image."""
    c, t, h, w = volume.data.shape
    if not 0 <= frame < t:
        raise ValidationError(f"frame {frame} out of range for T={t}")
    cols = int(np.ceil(np.sqrt(c)))
    rows = int(np.ceil(c / cols))
    grid = np.zeros((rows * (h + pad) - pad, cols * (w + pad) - pad), dtype=np.uint8)
    for ch in range(c):
        r, col = divmod(ch, cols)
        tile = np.clip(volume.data[ch, frame] * 255.0, 0.0, 255.0).astype(np.uint8)
        grid[r * (h + pad):r * (h + pad) + h, col * (w + pad):col * (w + pad) + w] = tile
    return grid


def save_frame_grids(volume: HeatmapVolume, out_dir: str | Path, stem: str) -> list[Path]:
    """Write one grayscale PNG grid per frame; returns the written paths."""
    from PIL import Image

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for t in range(volume.data.shape[1]):
        path = out_dir / f"{stem}_t{t:03d}.png"
        Image.fromarray(frame_grid(volume, t), mode="L").save(path)
        paths.append(path)
    return paths
