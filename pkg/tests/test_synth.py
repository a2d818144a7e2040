import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kdpose.codec import decode, encode_targets, well_separated
from kdpose.geometry import DEFAULT_INTRINSICS, ObjectModel, Pose, project, transform_points
from kdpose.synth import (EASY_OPTIONS, AugmentConfig, DatasetFormatError, FrustumError, ResampleRequested,
                          SceneOptions, SceneSample, augment, cut_and_paste, default_models, generate_dataset,
                          generate_scene, read_dataset, render_background, write_dataset)

MODELS = default_models()
BY_CLASS = {m.class_id: m for m in MODELS}


def assert_labels_consistent(sample, tol=1e-6):
    for inst in sample.instances:
        kp = project(sample.intrinsics, transform_points(inst.pose, BY_CLASS[inst.class_id].keypoints3d))
        np.testing.assert_allclose(inst.keypoints2d, kp, atol=tol)


def round_trip_ok(sample):
    kps = np.array([i.keypoints2d for i in sample.instances])
    maps, fields = encode_targets(kps, [i.class_id for i in sample.instances], 1, sample.resolution,
                                  dtype=np.float64)
    dets = decode(maps, fields)
    if len(dets) != len(sample.instances):
        return False
    for inst in sample.instances:
        det = min(dets, key=lambda d: np.linalg.norm(d.centroid2d - inst.keypoints2d[8]))
        pts, conf = det.keypoints()
        if not np.all(conf > 0) or np.max(np.linalg.norm(pts - inst.keypoints2d, axis=1)) / 4 >= 0.5:
            return False
    return True


def test_fixed_identity_pose_centroid_on_principal_point():
    small = ObjectModel.cuboid((100, 100, 100))
    opts = SceneOptions(fixed_pose=Pose.identity((0, 0, 1000)))
    s = generate_scene([small], DEFAULT_INTRINSICS, np.random.default_rng(0), opts)
    np.testing.assert_allclose(s.instances[0].keypoints2d[8], [64, 64], atol=1e-9)


def test_fixed_pose_outside_frame_raises():
    opts = SceneOptions(fixed_pose=Pose.identity((2000, 0, 1000)))
    with pytest.raises(FrustumError):
        generate_scene(MODELS, DEFAULT_INTRINSICS, np.random.default_rng(0), opts)


def test_generated_samples_invariants():
    rng = np.random.default_rng(1)
    for _ in range(20):
        s = generate_scene(MODELS, rng=rng)
        assert s.image.shape == (3, 128, 128) and s.image.dtype == np.float32
        assert 0.0 <= s.image.min() and s.image.max() <= 1.0
        assert 1 <= len(s.instances) <= 2
        assert_labels_consistent(s)
        for k, inst in enumerate(s.instances):
            kp = inst.keypoints2d
            assert kp.min() >= 8 and kp.max() <= 127 - 8
            assert 600 <= inst.pose.t[2] <= 1200 and inst.pose.is_valid()
        rows, cols = np.nonzero(s.mask >= 0)
        assert len(rows)
        cx, cy = s.instances[0].keypoints2d[8]
        assert cols.min() <= cx <= cols.max() and rows.min() <= cy <= rows.max()


def test_same_seed_bit_identical():
    a = generate_scene(MODELS, rng=np.random.default_rng(5))
    b = generate_scene(MODELS, rng=np.random.default_rng(5))
    assert a.image.tobytes() == b.image.tobytes()
    assert a.instances[0].keypoints2d.tobytes() == b.instances[0].keypoints2d.tobytes()


def test_backgrounds_in_range():
    rng = np.random.default_rng(2)
    for kind in ("noise", "gradient", "checkerboard"):
        bg = render_background(rng, (32, 32), (kind,))
        assert bg.shape == (3, 32, 32) and bg.min() >= 0 and bg.max() <= 1


def test_generated_labels_round_trip():
    rng = np.random.default_rng(3)
    checked = 0
    while checked < 20:
        s = generate_scene(MODELS, rng=rng, options=EASY_OPTIONS)
        if well_separated(s.instances[0].keypoints2d, s.resolution):
            assert round_trip_ok(s)
            checked += 1


def test_cut_and_paste_semantics():
    rng = np.random.default_rng(4)
    fg = generate_scene(MODELS, rng=rng, options=EASY_OPTIONS)
    solid = SceneSample(np.full((3, 128, 128), 0.25, dtype=np.float32), [], DEFAULT_INTRINSICS)
    out = cut_and_paste(fg, solid, rng)
    obj = fg.mask >= 0
    np.testing.assert_array_equal(out.image[:, obj], fg.image[:, obj])
    assert np.all(out.image[:, ~obj] == 0.25)
    assert out.instances[0].keypoints2d.tobytes() == fg.instances[0].keypoints2d.tobytes()
    assert round_trip_ok(out)
    with pytest.raises(ValueError):
        cut_and_paste(fg, SceneSample(np.zeros((3, 64, 64), np.float32), [], DEFAULT_INTRINSICS))


def test_identity_augmentation_unchanged():
    s = generate_scene(MODELS, rng=np.random.default_rng(6))
    out = augment(s, np.random.default_rng(0), AugmentConfig.identity())
    assert out.image.tobytes() == s.image.tobytes()
    assert all(a.keypoints2d.tobytes() == b.keypoints2d.tobytes() for a, b in zip(out.instances, s.instances))


def test_rotation_30_keeps_labels_exact():
    rng = np.random.default_rng(7)
    cfg = AugmentConfig(0.0, (1.0, 1.0), (30.0, 30.0))
    done = 0
    while done < 5:
        s = generate_scene(MODELS, rng=rng, options=EASY_OPTIONS)
        try:
            out = augment(s, rng, cfg)
        except ResampleRequested:
            continue
        done += 1
        assert_labels_consistent(out)
        ang = np.degrees(np.arctan2(*(out.instances[0].pose.R @ s.instances[0].pose.R.T)[[1, 0], [0, 0]]))
        assert ang == pytest.approx(30.0)


def test_jitter_clamps_to_unit_range():
    s = generate_scene(MODELS, rng=np.random.default_rng(8))
    s.image[...] = 0.95
    out = augment(s, np.random.default_rng(0), AugmentConfig(1.0, (1.2, 1.2), (0.0, 0.0)))
    assert out.image.max() <= 1.0 and out.image.min() >= 0.0


def test_rotation_out_of_frame_requests_resample():
    # centroid near the corner: a 30 degree turn about the principal point leaves the frame
    opts = SceneOptions(fixed_pose=Pose.identity((280, 280, 700)), margin=0)
    s = generate_scene([ObjectModel.cuboid((40, 40, 40))], DEFAULT_INTRINSICS, np.random.default_rng(0), opts)
    with pytest.raises(ResampleRequested):
        augment(s, np.random.default_rng(0), AugmentConfig(0.0, (1.0, 1.0), (30.0, 30.0)))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_augmented_labels_always_consistent(seed):
    rng = np.random.default_rng(seed)
    s = generate_scene(MODELS, rng=rng)
    try:
        out = augment(s, rng)
    except ResampleRequested:
        return
    assert_labels_consistent(out)
    assert out.image.min() >= 0 and out.image.max() <= 1


def test_dataset_round_trip(tmp_path):
    samples, manifest = generate_dataset(7, 3, seed=2)
    write_dataset(samples, manifest, tmp_path / "d")
    back, man2 = read_dataset(tmp_path / "d")
    assert len(back) == 10 and man2.splits == manifest.splits and man2.seed == 2
    for a, b in zip(samples, back):
        assert a.image.tobytes() == b.image.tobytes()
        for ia, ib in zip(a.instances, b.instances):
            assert ia.keypoints2d.tobytes() == ib.keypoints2d.tobytes()
            assert ia.pose.R.tobytes() == ib.pose.R.tobytes()


def test_dataset_determinism():
    a, _ = generate_dataset(5, 2, seed=9)
    b, _ = generate_dataset(5, 2, seed=9)
    assert all(x.image.tobytes() == y.image.tobytes() for x, y in zip(a, b))
    c, _ = generate_dataset(5, 2, seed=10)
    assert a[0].image.tobytes() != c[0].image.tobytes()


def test_dataset_errors(tmp_path):
    samples, manifest = generate_dataset(3, 1, seed=0)
    write_dataset(samples, manifest, tmp_path / "d")
    img = tmp_path / "d" / "samples" / "00002.img"
    img.write_bytes(img.read_bytes()[:-10])
    with pytest.raises(DatasetFormatError, match="00002"):
        read_dataset(tmp_path / "d")
    write_dataset(samples, manifest, tmp_path / "e")
    m = json.loads((tmp_path / "e" / "manifest.json").read_text())
    m["sample_count"] = 5
    m["splits"]["test"] = [3, 4]
    (tmp_path / "e" / "manifest.json").write_text(json.dumps(m))
    with pytest.raises(DatasetFormatError):
        read_dataset(tmp_path / "e")
    m["splits"]["test"] = [2, 3]
    m["sample_count"] = 4
    (tmp_path / "e" / "manifest.json").write_text(json.dumps(m))
    with pytest.raises(DatasetFormatError):
        read_dataset(tmp_path / "e")


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31), st.sampled_from([20.0, 45.0, 90.0]))
def test_restricted_rotations_stay_in_ball(seed, bound):
    from kdpose.geometry import rotation_geodesic
    from kdpose.synth import VIEW_ROTATION, sample_rotation
    R = sample_rotation(np.random.default_rng(seed), bound)
    np.testing.assert_allclose(R @ R.T, np.eye(3), atol=1e-12)
    assert np.linalg.det(R) == pytest.approx(1.0)
    assert rotation_geodesic(R, VIEW_ROTATION) <= bound + 1e-9


def test_easy_preset_is_single_instance_restricted_view():
    assert EASY_OPTIONS.max_instances == 1 and EASY_OPTIONS.max_rotation_deg < 180
    samples, manifest = generate_dataset(4, 0, seed=1)
    assert all(len(s.instances) == 1 for s in samples)
    assert manifest.options["scene"]["max_rotation_deg"] == EASY_OPTIONS.max_rotation_deg
