import math

import numpy as np
import pytest

from microgesture.heatmaps import (HeatmapVolume, VolumeConfig, build_volume,
                                   channel_count, frame_grid,
                                   joint_heatmap_frame, limb_heatmap_frame,
                                   read_volume, save_frame_grids,
                                   subject_centered_crop,
                                   uniform_sample_indices, write_volume)
from microgesture.pose_io import SkeletonClip, ValidationError, get_layout


# ---------------------------------------------------------------------------
# Independent oracle: per-pixel double loops, scalar math only
# ---------------------------------------------------------------------------

def naive_crop(frames, padding):
    """Remap keypoints so the padded tight box over conf>0 points is [0,1]^2."""
    xs, ys = [], []
    for t in range(frames.shape[0]):
        for k in range(frames.shape[1]):
            if frames[t, k, 2] > 0:
                xs.append(frames[t, k, 0])
                ys.append(frames[t, k, 1])
    x_min, x_max = min(xs), max(xs)
    y_min, y_max = min(ys), max(ys)
    if x_max == x_min:
        x_min, x_max = x_min - 0.5, x_max + 0.5
    if y_max == y_min:
        y_min, y_max = y_min - 0.5, y_max + 0.5
    pad_x = padding * (x_max - x_min)
    pad_y = padding * (y_max - y_min)
    x0, bw = x_min - pad_x, (x_max - x_min) * (1 + 2 * padding)
    y0, bh = y_min - pad_y, (y_max - y_min) * (1 + 2 * padding)
    out = frames.copy()
    out[:, :, 0] = (frames[:, :, 0] - x0) / bw
    out[:, :, 1] = (frames[:, :, 1] - y0) / bh
    return out


def naive_sample(t_in, t_out):
    return [min(int((s + 0.5) * t_in / t_out), t_in - 1) for s in range(t_out)]


def naive_joint_frame(kpts, height, width, sigma):
    out = np.zeros((kpts.shape[0], height, width))
    for k in range(kpts.shape[0]):
        xk, yk, ck = kpts[k, 0] * width, kpts[k, 1] * height, kpts[k, 2]
        for i in range(height):
            for j in range(width):
                d2 = (j + 0.5 - xk) ** 2 + (i + 0.5 - yk) ** 2
                out[k, i, j] = ck * math.exp(-d2 / (2 * sigma * sigma))
    return out


def naive_limb_frame(kpts, pairs, height, width, sigma):
    out = np.zeros((len(pairs), height, width))
    for idx, (a, b) in enumerate(pairs):
        ax, ay = kpts[a, 0] * width, kpts[a, 1] * height
        bx, by = kpts[b, 0] * width, kpts[b, 1] * height
        w = min(kpts[a, 2], kpts[b, 2])
        for i in range(height):
            for j in range(width):
                px, py = j + 0.5, i + 0.5
                sx, sy = bx - ax, by - ay
                ll = sx * sx + sy * sy
                if ll == 0:
                    d2 = (px - ax) ** 2 + (py - ay) ** 2
                else:
                    t = ((px - ax) * sx + (py - ay) * sy) / ll
                    t = min(1.0, max(0.0, t))
                    d2 = (px - ax - t * sx) ** 2 + (py - ay - t * sy) ** 2
                out[idx, i, j] = w * math.exp(-d2 / (2 * sigma * sigma))
    return out


def naive_volume(clip, layout, cfg):
    frames = naive_crop(np.array(clip.frames), cfg.crop_padding)
    idx = naive_sample(clip.num_frames, cfg.frames)
    planes = []
    for t in idx:
        if cfg.modality == "joint":
            planes.append(naive_joint_frame(frames[t], cfg.height, cfg.width, cfg.sigma))
        else:
            planes.append(naive_limb_frame(frames[t], layout.limb_pairs,
                                           cfg.height, cfg.width, cfg.sigma))
    return np.stack(planes, axis=1)


def random_clip(rng, layout, t=None):
    t = t or int(rng.integers(3, 9))
    k = layout.num_joints
    frames = np.empty((t, k, 3))
    frames[:, :, 0] = rng.uniform(-30, 170, (t, k))
    frames[:, :, 1] = rng.uniform(-20, 140, (t, k))
    frames[:, :, 2] = rng.uniform(0, 1, (t, k))
    frames[:, :, 2][rng.random((t, k)) < 0.15] = 0.0
    frames[0, 0, 2] = max(frames[0, 0, 2], 0.5)  # keep the box non-empty
    return SkeletonClip(clip_id="r", subject_id="s", label_id=0, frames=frames)


# ---------------------------------------------------------------------------
# Temporal sampling
# ---------------------------------------------------------------------------

class TestUniformSampling:
    def test_ten_to_five(self):
        assert uniform_sample_indices(10, 5).tolist() == [1, 3, 5, 7, 9]

    def test_short_clip_repeats(self):
        assert uniform_sample_indices(2, 4).tolist() == [0, 0, 1, 1]

    def test_identity_when_equal(self):
        assert uniform_sample_indices(4, 4).tolist() == [0, 1, 2, 3]

    def test_matches_naive_rule(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            t_in = int(rng.integers(1, 40))
            t_out = int(rng.integers(1, 20))
            got = uniform_sample_indices(t_in, t_out).tolist()
            assert got == naive_sample(t_in, t_out), (t_in, t_out)

    def test_train_mode_stays_in_segments(self):
        for seed in range(30):
            idx = uniform_sample_indices(20, 5, mode="train", seed=seed)
            seg = 20 / 5
            for s, i in enumerate(idx):
                assert s * seg <= i < (s + 1) * seg

    def test_train_mode_deterministic_per_seed(self):
        a = uniform_sample_indices(17, 6, mode="train", seed=11)
        b = uniform_sample_indices(17, 6, mode="train", seed=11)
        assert a.tolist() == b.tolist()

    def test_indices_nondecreasing_and_in_range(self):
        rng = np.random.default_rng(3)
        for _ in range(100):
            t_in = int(rng.integers(1, 30))
            t_out = int(rng.integers(1, 30))
            idx = uniform_sample_indices(t_in, t_out, mode="train", seed=int(rng.integers(1 << 30)))
            assert (np.diff(idx) >= 0).all()
            assert idx.min() >= 0 and idx.max() < t_in

    def test_bad_args(self):
        with pytest.raises(ValidationError):
            uniform_sample_indices(0, 4)
        with pytest.raises(ValidationError):
            uniform_sample_indices(4, 4, mode="maybe")


# ---------------------------------------------------------------------------
# Cropping
# ---------------------------------------------------------------------------

class TestCrop:
    def test_remapped_points_fill_unit_square(self):
        rng = np.random.default_rng(1)
        clip = random_clip(rng, get_layout("toy_5"))
        cropped, _ = subject_centered_crop(clip, 0.0)
        mask = cropped.frames[:, :, 2] > 0
        xs = cropped.frames[:, :, 0][mask]
        ys = cropped.frames[:, :, 1][mask]
        assert xs.min() == pytest.approx(0.0) and xs.max() == pytest.approx(1.0)
        assert ys.min() == pytest.approx(0.0) and ys.max() == pytest.approx(1.0)

    def test_padding_shrinks_occupied_range(self):
        rng = np.random.default_rng(2)
        clip = random_clip(rng, get_layout("toy_5"))
        cropped, _ = subject_centered_crop(clip, 0.25)
        mask = cropped.frames[:, :, 2] > 0
        xs = cropped.frames[:, :, 0][mask]
        assert xs.min() == pytest.approx(0.25 / 1.5)
        assert xs.max() == pytest.approx(1.25 / 1.5)

    def test_degenerate_box_maps_center_to_half(self):
        frames = np.zeros((2, 5, 3))
        frames[:, :, 0] = 40.0
        frames[:, :, 1] = 30.0
        frames[:, :, 2] = 1.0
        clip = SkeletonClip("c", "s", 0, frames)
        for padding in (0.0, 0.1, 0.5):
            cropped, _ = subject_centered_crop(clip, padding)
            assert cropped.frames[:, :, 0] == pytest.approx(0.5)
            assert cropped.frames[:, :, 1] == pytest.approx(0.5)

    def test_empty_skeleton_rejected(self):
        frames = np.zeros((2, 5, 3))
        clip = SkeletonClip("c", "s", 0, frames)
        with pytest.raises(ValidationError):
            subject_centered_crop(clip, 0.1)

    def test_zero_conf_points_ignored_by_box(self):
        frames = np.zeros((1, 5, 3))
        frames[0, :, 0] = [10, 20, 30, 999, -999]
        frames[0, :, 1] = [10, 15, 20, 999, -999]
        frames[0, :, 2] = [1, 1, 1, 0, 0]
        clip = SkeletonClip("c", "s", 0, frames)
        cropped, _ = subject_centered_crop(clip, 0.0)
        assert cropped.frames[0, :3, 0].min() == pytest.approx(0.0)
        assert cropped.frames[0, :3, 0].max() == pytest.approx(1.0)

    def test_affine_matches_mapping(self):
        rng = np.random.default_rng(4)
        clip = random_clip(rng, get_layout("toy_5"))
        cropped, affine = subject_centered_crop(clip, 0.1)
        pts = np.concatenate([clip.frames[:, :, :2],
                              np.ones((clip.num_frames, clip.num_joints, 1))], axis=2)
        mapped = pts @ affine.T
        np.testing.assert_allclose(mapped, cropped.frames[:, :, :2], atol=1e-12)

    def test_matches_naive_crop(self):
        rng = np.random.default_rng(5)
        for _ in range(50):
            clip = random_clip(rng, get_layout("toy_5"))
            padding = float(rng.uniform(0, 0.4))
            cropped, _ = subject_centered_crop(clip, padding)
            expect = naive_crop(np.array(clip.frames), padding)
            np.testing.assert_allclose(cropped.frames, expect, atol=1e-12)


# ---------------------------------------------------------------------------
# Frame rendering
# ---------------------------------------------------------------------------

class TestFrames:
    def test_peak_value_is_confidence_on_grid(self):
        # keypoint placed exactly on the center of pixel (2, 3) of an 8x8 canvas
        kpts = np.array([[3.5 / 8, 2.5 / 8, 0.7]])
        frame = joint_heatmap_frame(kpts, 8, 8, 0.6)
        assert frame[0, 2, 3] == pytest.approx(0.7, abs=1e-12)
        assert frame.max() == pytest.approx(0.7, abs=1e-12)

    def test_value_at_one_sigma(self):
        sigma = 0.9
        kpts = np.array([[4.5 / 16, 4.5 / 16, 1.0]])
        frame = joint_heatmap_frame(kpts, 16, 16, sigma)
        # pixel centers sigma away horizontally: x = 4.5 + 0.9
        d2 = 0.9 ** 2
        expect = math.exp(-d2 / (2 * sigma * sigma))
        got = frame[0, 4, :]  # row through the peak
        xs = np.arange(16) + 0.5
        ref = np.exp(-((xs - 4.5) ** 2) / (2 * sigma * sigma))
        np.testing.assert_allclose(got, ref, atol=1e-12)
        assert expect == pytest.approx(math.exp(-0.5))

    def test_zero_confidence_gives_zero_channel(self):
        kpts = np.array([[0.5, 0.5, 0.0], [0.25, 0.25, 1.0]])
        frame = joint_heatmap_frame(kpts, 12, 12, 0.6)
        assert frame[0].max() == 0.0
        assert frame[1].max() > 0.0

    def test_limb_weight_is_min_confidence(self):
        # segment along y=0.45 passes exactly through the row-4 pixel centers
        kpts = np.array([[0.25, 0.45, 0.9], [0.75, 0.45, 0.4]])
        frame = limb_heatmap_frame(kpts, ((0, 1),), 10, 10, 0.8)
        assert frame.max() == pytest.approx(0.4, abs=1e-9)

    def test_limb_collapses_to_point_gaussian(self):
        kpts = np.array([[0.5, 0.5, 1.0], [0.5, 0.5, 1.0]])
        limb = limb_heatmap_frame(kpts, ((0, 1),), 9, 9, 0.7)
        joint = joint_heatmap_frame(kpts[:1], 9, 9, 0.7)
        np.testing.assert_allclose(limb[0], joint[0], atol=1e-12)

    def test_limb_ridge_constant_along_segment(self):
        # horizontal segment through pixel-row centers: all pixels between the
        # endpoints see distance 0 in y and 0 along the ridge
        kpts = np.array([[2.5 / 12, 6.5 / 12, 1.0], [9.5 / 12, 6.5 / 12, 1.0]])
        frame = limb_heatmap_frame(kpts, ((0, 1),), 12, 12, 0.6)
        on_ridge = frame[0, 6, 3:9]
        np.testing.assert_allclose(on_ridge, 1.0, atol=1e-12)


# ---------------------------------------------------------------------------
# Volumes
# ---------------------------------------------------------------------------

class TestVolume:
    def test_shapes_joint_and_limb(self, toy_manifest):
        clip = toy_manifest.clips[0]
        layout = toy_manifest.layout
        cfg_j = VolumeConfig(height=16, width=16, frames=4, modality="joint")
        cfg_l = VolumeConfig(height=16, width=16, frames=4, modality="limb")
        assert build_volume(clip, layout, cfg_j).shape == (5, 4, 16, 16)
        assert build_volume(clip, layout, cfg_l).shape == (4, 4, 16, 16)
        assert channel_count(layout, "joint") == 5
        assert channel_count(layout, "limb") == 4

    def test_values_in_unit_interval(self, toy_manifest):
        cfg = VolumeConfig(height=12, width=12, frames=4)
        for clip in toy_manifest.clips[:4]:
            vol = build_volume(clip, toy_manifest.layout, cfg)
            assert vol.data.min() >= 0.0
            assert vol.data.max() <= 1.0

    def test_channel_peak_bounded_by_confidence(self):
        rng = np.random.default_rng(9)
        layout = get_layout("toy_5")
        cfg = VolumeConfig(height=10, width=10, frames=2)
        clip = random_clip(rng, layout)
        vol = build_volume(clip, layout, cfg)
        idx = [min(int((s + 0.5) * clip.num_frames / 2), clip.num_frames - 1) for s in range(2)]
        for t_out, t_src in enumerate(idx):
            conf = clip.frames[t_src, :, 2]
            for k in range(5):
                assert vol.data[k, t_out].max() <= conf[k] + 1e-6

    def test_matches_naive_oracle_joint(self):
        rng = np.random.default_rng(10)
        layout = get_layout("toy_5")
        for _ in range(10):
            clip = random_clip(rng, layout)
            cfg = VolumeConfig(height=9, width=11, frames=3, sigma=float(rng.uniform(0.4, 2.0)),
                               modality="joint", crop_padding=float(rng.uniform(0, 0.3)))
            got = np.asarray(build_volume(clip, layout, cfg).data, dtype=np.float64)
            want = naive_volume(clip, layout, cfg)
            assert np.abs(got - want).max() < 1e-6

    def test_matches_naive_oracle_limb(self):
        rng = np.random.default_rng(11)
        layout = get_layout("toy_5")
        for _ in range(10):
            clip = random_clip(rng, layout)
            cfg = VolumeConfig(height=8, width=8, frames=3, sigma=float(rng.uniform(0.4, 2.0)),
                               modality="limb", crop_padding=float(rng.uniform(0, 0.3)))
            got = np.asarray(build_volume(clip, layout, cfg).data, dtype=np.float64)
            want = naive_volume(clip, layout, cfg)
            assert np.abs(got - want).max() < 1e-6

    def test_translation_invariance(self):
        # integer shifts are exactly representable, so volumes match bitwise
        rng = np.random.default_rng(12)
        layout = get_layout("toy_5")
        clip = random_clip(rng, layout)
        shifted_frames = np.array(clip.frames)
        shifted_frames[:, :, 0] += 100.0
        shifted_frames[:, :, 1] += 100.0
        shifted = SkeletonClip("c2", "s", 0, shifted_frames)
        cfg = VolumeConfig(height=10, width=10, frames=4)
        a = build_volume(clip, layout, cfg).data
        b = build_volume(shifted, layout, cfg).data
        np.testing.assert_array_equal(a, b)

    def test_wrong_joint_count_rejected(self, toy_manifest):
        clip = toy_manifest.clips[0]
        layout = get_layout("upper_body_22")
        with pytest.raises(ValidationError):
            build_volume(clip, layout, VolumeConfig(height=8, width=8, frames=2))

    def test_dtype_and_read_only(self, toy_manifest):
        vol = build_volume(toy_manifest.clips[0], toy_manifest.layout,
                           VolumeConfig(height=8, width=8, frames=2))
        assert vol.data.dtype == np.float32
        with pytest.raises(ValueError):
            vol.data[0, 0, 0, 0] = 1.0


class TestVolumeFiles:
    def test_roundtrip(self, toy_manifest, tmp_path):
        vol = build_volume(toy_manifest.clips[0], toy_manifest.layout,
                           VolumeConfig(height=8, width=8, frames=2))
        path = tmp_path / "x.vol"
        write_volume(vol, path)
        back = read_volume(path)
        np.testing.assert_array_equal(np.asarray(vol.data), back)

    def test_header_is_sixteen_bytes(self, toy_manifest, tmp_path):
        vol = build_volume(toy_manifest.clips[0], toy_manifest.layout,
                           VolumeConfig(height=8, width=8, frames=2))
        path = tmp_path / "x.vol"
        write_volume(vol, path)
        blob = path.read_bytes()
        assert len(blob) == 16 + 4 * int(np.prod(vol.shape))

    def test_truncated_file_rejected(self, toy_manifest, tmp_path):
        vol = build_volume(toy_manifest.clips[0], toy_manifest.layout,
                           VolumeConfig(height=8, width=8, frames=2))
        path = tmp_path / "x.vol"
        write_volume(vol, path)
        path.write_bytes(path.read_bytes()[:-5])
        with pytest.raises(ValidationError):
            read_volume(path)


class TestFrameGrids:
    def test_grid_tiles_all_channels(self, toy_manifest):
        vol = build_volume(toy_manifest.clips[0], toy_manifest.layout,
                           VolumeConfig(height=8, width=8, frames=2))
        grid = frame_grid(vol, 0)
        assert grid.dtype == np.uint8
        cols = math.ceil(math.sqrt(vol.shape[0]))
        rows = math.ceil(vol.shape[0] / cols)
        assert grid.shape == (rows * 9 - 1, cols * 9 - 1)

    def test_png_files_written(self, toy_manifest, tmp_path):
        vol = build_volume(toy_manifest.clips[0], toy_manifest.layout,
                           VolumeConfig(height=8, width=8, frames=3))
        paths = save_frame_grids(vol, tmp_path, "clip")
        assert len(paths) == 3
        for p in paths:
            assert p.exists() and p.suffix == ".png"
