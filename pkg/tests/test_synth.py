import numpy as np
import pytest

from stereopose.errors import FrustumExhausted, IoFailure
from stereopose.geometry import (THETA_MAX, CameraRig, apply_pose, check_rotation, project,
                                 triangulate)
from stereopose.synth import (MotionConfig, NoiseConfig, PoseSampler, generate_dataset,
                              generate_records, generate_sequence, keypoints_in_view, make_record,
                              observe, random_rotation, read_dataset, read_sequence,
                              sample_pose)


def test_random_rotation_is_haar(rng):
    R = np.stack([random_rotation(rng) for _ in range(20_000)])
    for r in R[:100]:
        check_rotation(r)
    # E[tr R] = 1 + 2 E[cos(angle)] = 0 under the Haar measure
    assert abs(np.trace(R, axis1=1, axis2=2).mean()) < 0.05
    # every entry has mean 0 and variance 1/3
    assert np.abs(R.mean(0)).max() < 0.02
    assert np.abs(R.var(0) - 1 / 3).max() < 0.02


def test_sampled_rotation_trace_mean(models, rig):
    recs = generate_records(models, rig, PoseSampler(seed=11), 2000)
    traces = [np.trace(r.pose.rotation) for r in recs]
    assert abs(np.mean(traces)) < 0.05


def test_sample_pose_in_view_and_ranges(models, rig, rng):
    sampler = PoseSampler(seed=0)
    for _ in range(200):
        m = models[int(rng.integers(13))]
        pose = sample_pose(sampler, m, rig, rng)
        assert -200 <= pose.translation[0] <= 200 and 400 <= pose.translation[2] <= 1500
        assert 0.0 <= pose.articulation <= THETA_MAX
        assert keypoints_in_view(rig, apply_pose(pose, m))


def test_sample_pose_frustum_exhausted(models, rig):
    far_left = PoseSampler(x_range=(-5000, -4000), seed=1)
    with pytest.raises(FrustumExhausted):
        sample_pose(far_left, models[0], rig)


def test_sample_pose_deterministic(models, rig):
    s = PoseSampler(seed=5)
    a, b = sample_pose(s, models[0], rig), sample_pose(s, models[0], rig)
    assert np.array_equal(a.as_vector(), b.as_vector())


def test_clean_observation_triangulates_to_keypoints(models, rig):
    for i in range(50):
        rec = make_record(models, rig, PoseSampler(seed=2), None, i)
        kp = rec.observation.keypoints
        back = triangulate(rig, kp[:, :2], kp[:, 2:])
        assert np.abs(back - rec.keypoints3d).max() < 1e-6
        assert rec.observation.visible.all()


def test_noise_config_validation():
    with pytest.raises(ValueError):
        NoiseConfig(keypoint_sigma=-1)
    with pytest.raises(ValueError):
        NoiseConfig(dropout_prob=1.5)


def test_noise_statistics(models, rig):
    noise = NoiseConfig(keypoint_sigma=2.0, dropout_prob=0.05, misclass_prob=0.02)
    clean = generate_records(models, rig, PoseSampler(seed=3), 3000)
    noisy = generate_records(models, rig, PoseSampler(seed=3), 3000, noise)
    d = np.concatenate([(n.observation.keypoints - c.observation.keypoints)[c.observation.visible]
                        for n, c in zip(noisy, clean)])
    assert abs(d.std() - 2.0) < 0.05
    drop = np.mean([(~n.observation.visible & c.observation.visible).sum() / 12
                    for n, c in zip(noisy, clean)])
    assert abs(drop - 0.05) < 0.01
    flips = np.mean([n.observation.class_id != n.class_id for n in noisy])
    assert abs(flips - 0.02) < 0.01
    scores = np.array([n.observation.score for n in noisy])
    assert scores.min() >= 0.1 and scores.max() <= 1.0


def test_dataset_independent_of_workers(models, rig, tmp_path):
    sampler, noise = PoseSampler(seed=9), NoiseConfig()
    a = generate_dataset(models, rig, sampler, 900, noise, tmp_path / "a.ds", workers=1, chunk=100)
    b = generate_dataset(models, rig, sampler, 900, noise, tmp_path / "b.ds", workers=3, chunk=100)
    assert a.read_bytes() == b.read_bytes()


def test_dataset_file_round_trip(models, rig, tmp_path):
    sampler = PoseSampler(seed=4)
    recs = generate_records(models, rig, sampler, 200)
    path = generate_dataset(models, rig, sampler, 200, None, tmp_path / "d.ds")
    header, back = read_dataset(path)
    assert header["n"] == 200 and header["classes"] == 13
    for r, b in zip(recs, back):
        assert r.class_id == b.class_id
        assert np.allclose(b.pose.as_vector(), r.pose.as_vector(), rtol=1e-8, atol=1e-9)
        assert np.array_equal(r.observation.visible, b.observation.visible)
        # reprojecting the stored 3D keypoints reproduces the stored pixels
        kp = b.observation.keypoints
        assert np.abs(project(rig, "left", b.keypoints3d) - kp[:, :2]).max() < 1e-5
        assert np.abs(project(rig, "right", b.keypoints3d) - kp[:, 2:]).max() < 1e-5


def test_read_dataset_errors(tmp_path):
    with pytest.raises(IoFailure):
        read_dataset(tmp_path / "none.ds")
    p = tmp_path / "x.ds"
    p.write_text('{"format": "other"}\n')
    with pytest.raises(IoFailure):
        read_dataset(p)


def test_observe_boxes_contain_keypoints(models, rig, rng):
    pose = sample_pose(PoseSampler(seed=1), models[4], rig, rng)
    obs, _ = observe(pose, models[4], rig)
    for box, cols in ((obs.box_left, slice(0, 2)), (obs.box_right, slice(2, 4))):
        uv = obs.keypoints[:, cols]
        assert np.all(uv >= box[:2] - 1e-9) and np.all(uv <= box[2:] + 1e-9)


def test_static_sequence_is_constant(models, rig):
    dets = generate_sequence(models, rig, 20, 1, MotionConfig(mode="static"), seed=3)
    poses = np.stack([d.record.pose.as_vector() for d in dets])
    assert np.ptp(poses, axis=0).max() == 0.0


def test_spline_sequence_is_smooth(models, rig):
    dets = generate_sequence(models, rig, 60, 2, MotionConfig(), seed=4)
    for obj in (0, 1):
        t = np.stack([d.record.pose.translation for d in dets if d.track_gt_id == obj])
        step = np.linalg.norm(np.diff(t, axis=0), axis=1)
        assert step.max() < 40.0
        for d in dets:
            check_rotation(d.record.pose.rotation)


def test_crossing_objects_swap_sides(models, rig):
    dets = generate_sequence(models, rig, 40, 2, MotionConfig(mode="crossing"), seed=1)
    x = {(d.frame_index, d.track_gt_id): d.record.pose.translation[0] for d in dets}
    assert x[(0, 0)] < x[(0, 1)] and x[(39, 0)] > x[(39, 1)]


def test_occlusion_window_lowers_score(models, rig):
    dets = generate_sequence(models, rig, 30, 1, occlusion_windows=[(0, 10, 19, 0.3)], seed=2)
    scores = {d.frame_index: d.observation.score for d in dets}
    assert all(scores[f] == 0.3 for f in range(10, 20))
    assert scores[5] == 0.95 and scores[25] == 0.95


def test_sequence_file_round_trip(models, rig, tmp_path):
    noise = NoiseConfig(misclass_prob=0.3)
    dets = generate_sequence(models, rig, 15, 2, noise=noise, seed=6, path=tmp_path / "s.seq")
    header, back = read_sequence(tmp_path / "s.seq")
    assert header["n_frames"] == 15 and len(back) == 30
    for a, b in zip(dets, back):
        assert (a.frame_index, a.track_gt_id) == (b.frame_index, b.track_gt_id)
        assert b.record.class_id == a.record.class_id
        assert b.observation.class_id == a.observation.class_id
        assert b.observation.score == pytest.approx(a.observation.score, rel=1e-8)
        assert np.allclose(b.observation.box_left, a.observation.box_left, rtol=1e-8)


def test_sequence_requires_two_frames(models, rig):
    with pytest.raises(ValueError):
        generate_sequence(models, rig, 1, 1)


def test_custom_rig_recorded(models, tmp_path):
    rig = CameraRig(fx=900, fy=900, baseline=50)
    generate_dataset(models, rig, PoseSampler(seed=1), 10, None, tmp_path / "d.ds")
    header, _ = read_dataset(tmp_path / "d.ds")
    assert CameraRig.from_dict(header["rig"]) == rig
