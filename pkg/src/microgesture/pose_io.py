"""Dataset schema, manifest I/O, and synthetic clip generation.

A dataset is a single JSON manifest holding the keypoint layout, the label
vocabulary, subject-level split assignments, and the clips themselves
(per-frame 2D keypoints with confidences, in original image pixels).
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
SPLIT_NAMES = ("train", "val", "test")


class ValidationError(ValueError):
    """A manifest, clip, or config value violates one of its invariants."""


@dataclass(frozen=True)
class KeypointLayout:
    """Named skeleton layout: joint names plus limb connectivity."""

    name: str
    joint_names: tuple[str, ...]
    limb_pairs: tuple[tuple[int, int], ...]

    def __post_init__(self):
        k = len(self.joint_names)
        if k < 2:
            raise ValidationError(f"layout {self.name!r}: needs at least 2 joints, got {k}")
        seen = set()
        for a, b in self.limb_pairs:
            if not (0 <= a < k and 0 <= b < k):
                raise ValidationError(f"layout {self.name!r}: limb ({a},{b}) out of range for K={k}")
            key = (min(a, b), max(a, b))
            if key in seen:
                raise ValidationError(f"layout {self.name!r}: duplicate limb pair ({a},{b})")
            seen.add(key)

    @property
    def num_joints(self) -> int:
        return len(self.joint_names)

    @property
    def num_limbs(self) -> int:
        return len(self.limb_pairs)


@dataclass(frozen=True)
class LabelVocabulary:
    """Ordered list of human-readable label strings; index == class id."""

    labels: tuple[str, ...]

    def __post_init__(self):
        if not self.labels:
            raise ValidationError("vocabulary is empty")
        for i, text in enumerate(self.labels):
            if not text or not text.strip():
                raise ValidationError(f"vocabulary: label {i} is empty")

    @property
    def n(self) -> int:
        return len(self.labels)


@dataclass(frozen=True, eq=False)
class SkeletonClip:
    """One labelled clip: frames is a (T, K, 3) array of (x, y, confidence).

    Coordinates stay in original image pixels; missing keypoints are kept
    with confidence 0 so downstream heatmaps are simply zero there.
    """

    clip_id: str
    subject_id: str
    label_id: int
    frames: np.ndarray

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.float64)
        if frames.ndim != 3 or frames.shape[2] != 3:
            raise ValidationError(f"clip {self.clip_id!r}: frames must be (T, K, 3), got {frames.shape}")
        if frames.shape[0] < 1:
            raise ValidationError(f"clip {self.clip_id!r}: needs at least one frame")
        if not np.isfinite(frames[:, :, :2]).all():
            raise ValidationError(f"clip {self.clip_id!r}: non-finite keypoint coordinate")
        conf = frames[:, :, 2]
        if not np.isfinite(conf).all() or conf.min() < 0.0 or conf.max() > 1.0:
            raise ValidationError(f"clip {self.clip_id!r}: confidences must lie in [0, 1]")
        if self.label_id < 0:
            raise ValidationError(f"clip {self.clip_id!r}: negative label_id")
        frames.setflags(write=False)
        object.__setattr__(self, "frames", frames)

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def num_joints(self) -> int:
        return self.frames.shape[1]


@dataclass(frozen=True, eq=False)
class DatasetManifest:
    """Clips plus layout, vocabulary, and subject-level split assignments."""

    layout: KeypointLayout
    vocab: LabelVocabulary
    splits: dict[str, tuple[str, ...]]
    clips: tuple[SkeletonClip, ...]

    def __post_init__(self):
        for name in self.splits:
            if name not in SPLIT_NAMES:
                raise ValidationError(f"unknown split name {name!r}")
        assigned: dict[str, str] = {}
        for name in SPLIT_NAMES:
            for subject in self.splits.get(name, ()):
                if subject in assigned:
                    raise ValidationError(
                        f"subject {subject!r} in two splits ({assigned[subject]} and {name})"
                    )
                assigned[subject] = name
        seen_ids = set()
        for clip in self.clips:
            if clip.clip_id in seen_ids:
                raise ValidationError(f"duplicate clip_id {clip.clip_id!r}")
            seen_ids.add(clip.clip_id)
            if clip.label_id >= self.vocab.n:
                raise ValidationError(
                    f"clip {clip.clip_id!r}: label_id {clip.label_id} out of range for {self.vocab.n} classes"
                )
            if clip.num_joints != self.layout.num_joints:
                raise ValidationError(
                    f"clip {clip.clip_id!r}: has {clip.num_joints} joints, layout expects {self.layout.num_joints}"
                )
            if clip.subject_id not in assigned:
                raise ValidationError(f"clip {clip.clip_id!r}: subject {clip.subject_id!r} not in any split")

    def clips_for(self, split: str) -> list[SkeletonClip]:
        if split not in SPLIT_NAMES:
            raise ValidationError(f"unknown split name {split!r}")
        subjects = set(self.splits.get(split, ()))
        return [c for c in self.clips if c.subject_id in subjects]


# ---------------------------------------------------------------------------
# Built-in layouts
# ---------------------------------------------------------------------------

# Upper-body layout (K=22). The 12 body points follow the usual OpenPose
# ordering; the subset choice (body + fingertips, no lower body) is our
# convention for hand-centric upper-body gestures.
UPPER_BODY_22 = KeypointLayout(
    name="upper_body_22",
    joint_names=(
        "nose", "neck",
        "r_shoulder", "r_elbow", "r_wrist",
        "l_shoulder", "l_elbow", "l_wrist",
        "r_eye", "l_eye", "r_ear", "l_ear",
        "r_thumb_tip", "r_index_tip", "r_middle_tip", "r_ring_tip", "r_pinky_tip",
        "l_thumb_tip", "l_index_tip", "l_middle_tip", "l_ring_tip", "l_pinky_tip",
    ),
    limb_pairs=(
        (0, 1),
        (1, 2), (2, 3), (3, 4),
        (1, 5), (5, 6), (6, 7),
        (0, 8), (0, 9), (8, 10), (9, 11),
        (4, 12), (4, 13), (4, 14), (4, 15), (4, 16),
        (7, 17), (7, 18), (7, 19), (7, 20), (7, 21),
    ),
)

# Whole-body layout (K=25), standard 25-point pose-estimator skeleton.
WHOLE_BODY_25 = KeypointLayout(
    name="whole_body_25",
    joint_names=(
        "nose", "neck",
        "r_shoulder", "r_elbow", "r_wrist",
        "l_shoulder", "l_elbow", "l_wrist",
        "mid_hip", "r_hip", "r_knee", "r_ankle",
        "l_hip", "l_knee", "l_ankle",
        "r_eye", "l_eye", "r_ear", "l_ear",
        "l_big_toe", "l_small_toe", "l_heel",
        "r_big_toe", "r_small_toe", "r_heel",
    ),
    limb_pairs=(
        (1, 8), (1, 2), (1, 5), (2, 3), (3, 4), (5, 6), (6, 7),
        (8, 9), (9, 10), (10, 11), (8, 12), (12, 13), (13, 14),
        (1, 0), (0, 15), (15, 17), (0, 16), (16, 18),
        (14, 19), (19, 20), (14, 21), (11, 22), (22, 23), (11, 24),
    ),
)

# Small layout for tests and demos.
TOY_5 = KeypointLayout(
    name="toy_5",
    joint_names=("head", "torso", "l_hand", "r_hand", "pelvis"),
    limb_pairs=((0, 1), (1, 2), (1, 3), (1, 4)),
)

BUILTIN_LAYOUTS = {layout.name: layout for layout in (UPPER_BODY_22, WHOLE_BODY_25, TOY_5)}


def get_layout(name: str) -> KeypointLayout:
    try:
        return BUILTIN_LAYOUTS[name]
    except KeyError:
        raise ValidationError(f"unknown layout {name!r}; built-ins: {sorted(BUILTIN_LAYOUTS)}") from None


# ---------------------------------------------------------------------------
# Manifest I/O
# ---------------------------------------------------------------------------

def load_manifest(path: str | Path) -> DatasetManifest:
    """Load and validate a dataset manifest from a JSON file."""
    path = Path(path)
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: failed to parse manifest: {exc}") from exc
    return manifest_from_dict(raw)


def manifest_from_dict(raw: dict) -> DatasetManifest:
    if not isinstance(raw, dict):
        raise ValidationError("manifest root must be an object")
    schema = raw.get("schema")
    if schema != SCHEMA_VERSION:
        raise ValidationError(f"unsupported manifest schema {schema!r} (expected {SCHEMA_VERSION})")
    for key in ("layout", "vocab", "splits", "clips"):
        if key not in raw:
            raise ValidationError(f"manifest missing top-level key {key!r}")
    lay = raw["layout"]
    try:
        layout = KeypointLayout(
            name=str(lay["name"]),
            joint_names=tuple(str(j) for j in lay["joint_names"]),
            limb_pairs=tuple((int(a), int(b)) for a, b in lay["limb_pairs"]),
        )
    except (KeyError, TypeError) as exc:
        raise ValidationError(f"malformed layout section: {exc}") from exc
    vocab = LabelVocabulary(tuple(str(t) for t in raw["vocab"]))
    splits = {name: tuple(str(s) for s in members) for name, members in raw["splits"].items()}
    clips = []
    for entry in raw["clips"]:
        try:
            t, k = int(entry["num_frames"]), int(entry["num_joints"])
            flat = np.asarray(entry["frames"], dtype=np.float64)
            clip_id = str(entry["clip_id"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ValidationError(f"malformed clip entry: {exc}") from exc
        if flat.size != t * k * 3:
            raise ValidationError(
                f"clip {clip_id!r}: frames has {flat.size} numbers, expected T*K*3 = {t * k * 3}"
            )
        clips.append(
            SkeletonClip(
                clip_id=clip_id,
                subject_id=str(entry["subject_id"]),
                label_id=int(entry["label_id"]),
                frames=flat.reshape(t, k, 3),
            )
        )
    return DatasetManifest(layout=layout, vocab=vocab, splits=splits, clips=tuple(clips))


def manifest_to_dict(manifest: DatasetManifest) -> dict:
    return {
        "schema": SCHEMA_VERSION,
        "layout": {
            "name": manifest.layout.name,
            "joint_names": list(manifest.layout.joint_names),
            "limb_pairs": [list(pair) for pair in manifest.layout.limb_pairs],
        },
        "vocab": list(manifest.vocab.labels),
        "splits": {name: list(manifest.splits.get(name, ())) for name in SPLIT_NAMES},
        "clips": [
            {
                "clip_id": clip.clip_id,
                "subject_id": clip.subject_id,
                "label_id": clip.label_id,
                "num_frames": clip.num_frames,
                "num_joints": clip.num_joints,
                "frames": [float(v) for v in clip.frames.reshape(-1)],
            }
            for clip in manifest.clips
        ],
    }


def write_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    """Write a manifest as JSON. Deterministic: identical manifests give identical bytes."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest_to_dict(manifest), fh, separators=(",", ":"))
        fh.write("\n")


def manifests_equal(a: DatasetManifest, b: DatasetManifest) -> bool:
    if a.layout != b.layout or a.vocab != b.vocab or len(a.clips) != len(b.clips):
        return False
    if {k: tuple(v) for k, v in a.splits.items()} != {k: tuple(v) for k, v in b.splits.items()}:
        return False
    for ca, cb in zip(a.clips, b.clips):
        if (ca.clip_id, ca.subject_id, ca.label_id) != (cb.clip_id, cb.subject_id, cb.label_id):
            return False
        if not np.array_equal(ca.frames, cb.frames):
            return False
    return True


# ---------------------------------------------------------------------------
# Synthetic datasets
# ---------------------------------------------------------------------------

_GESTURE_POOL = (
    "touching head", "scratching neck", "folding arms", "rubbing eyes",
    "covering face", "touching nose", "playing with hair", "biting nails",
    "crossing fingers", "shrugging shoulders", "adjusting collar", "wiping mouth",
    "tapping fingers", "holding wrist", "raising hand", "leaning back",
)


def synthesize_dataset(
    n_clips: int,
    n_classes: int,
    layout: KeypointLayout,
    seed: int,
    n_subjects: int | None = None,
    split_fractions: tuple[float, float, float] = (0.5, 0.25, 0.25),
    frames_range: tuple[int, int] = (12, 24),
    noise: float = 0.5,
) -> DatasetManifest:
    """Generate a deterministic desk-scale dataset.

    Every class gets at least one clip, and clips of the same class share a
    distinguishable motion pattern (one class-specific joint oscillates along
    a class-specific direction at a class-specific frequency), so a small
    model can reach perfect training accuracy.
    """
    if n_classes < 2:
        raise ValidationError(f"need at least 2 classes, got {n_classes}")
    if n_clips < n_classes:
        raise ValidationError(f"need n_clips >= n_classes, got {n_clips} < {n_classes}")
    if frames_range[0] < 1 or frames_range[1] < frames_range[0]:
        raise ValidationError(f"bad frames_range {frames_range}")
    fr_train, fr_val, fr_test = split_fractions
    if min(split_fractions) < 0 or fr_train <= 0:
        raise ValidationError(f"bad split_fractions {split_fractions}")

    rng = np.random.default_rng(seed)
    k = layout.num_joints
    if n_subjects is None:
        n_subjects = min(n_clips, max(3, n_clips // 2))
    n_subjects = max(1, min(n_subjects, n_clips))
    subjects = [f"synth_subj_{i:02d}" for i in range(n_subjects)]

    total = fr_train + fr_val + fr_test
    n_train = max(1, round(n_subjects * fr_train / total))
    n_val = min(n_subjects - n_train, round(n_subjects * fr_val / total))
    splits = {
        "train": tuple(subjects[:n_train]),
        "val": tuple(subjects[n_train:n_train + n_val]),
        "test": tuple(subjects[n_train + n_val:]),
    }

    # Base skeleton pose: joints spread on a circle, in image pixels.
    width, height = 160.0, 120.0
    angles = 2.0 * np.pi * np.arange(k) / k
    base_x = width / 2 + 0.30 * height * np.cos(angles)
    base_y = height / 2 + 0.30 * height * np.sin(angles)

    clips = []
    for i in range(n_clips):
        label = i % n_classes
        subject_idx = i * n_subjects // n_clips
        t = int(rng.integers(frames_range[0], frames_range[1] + 1))

        moving_joint = label % k
        direction = 2.0 * np.pi * label / n_classes
        freq = 1.0 + (label // k)
        phase = rng.uniform(0.0, 0.3)
        amplitude = 0.28 * height

        frames = np.empty((t, k, 3), dtype=np.float64)
        times = np.arange(t) / max(t - 1, 1)
        offsets = amplitude * np.sin(2.0 * np.pi * freq * times + phase)
        frames[:, :, 0] = base_x[None, :]
        frames[:, :, 1] = base_y[None, :]
        frames[:, moving_joint, 0] += offsets * np.cos(direction)
        frames[:, moving_joint, 1] += offsets * np.sin(direction)
        # per-subject placement offset plus jitter
        frames[:, :, 0] += 5.0 * subject_idx + rng.normal(0.0, noise, (t, k))
        frames[:, :, 1] += 3.0 * subject_idx + rng.normal(0.0, noise, (t, k))
        conf = rng.uniform(0.85, 1.0, (t, k))
        conf[rng.random((t, k)) < 0.03] = 0.0
        conf[:, 0] = np.maximum(conf[:, 0], 0.85)  # keep the clip croppable
        frames[:, :, 2] = conf

        clips.append(
            SkeletonClip(
                clip_id=f"synth_{i:04d}",
                subject_id=subjects[subject_idx],
                label_id=label,
                frames=frames,
            )
        )

    labels = tuple(
        _GESTURE_POOL[c] if c < len(_GESTURE_POOL) else f"gesture {c}" for c in range(n_classes)
    )
    return DatasetManifest(
        layout=layout,
        vocab=LabelVocabulary(labels),
        splits=splits,
        clips=tuple(clips),
    )
