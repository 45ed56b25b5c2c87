import dataclasses

import numpy as np
import pytest

from oracles import closest_mean_distance_loop, mean_distance_loop
from stereopose.errors import ClassMismatch, EmptyInput, LengthMismatch
from stereopose.geometry import Pose7D, apply_pose, axis_angle_to_matrix
from stereopose.metrics import (add, add_report, add_s, add_s_accuracy, confusion_matrix,
                                mpvpe, mpvpe_report, vertex_errors)
from stereopose.synth import random_rotation


def _pose(rng, scale=1.0):
    return Pose7D.from_matrix(rng.normal(size=3) * 50 * scale + [0, 0, 600],
                              random_rotation(rng), rng.uniform(0, np.pi / 2))


def _near(pose, rng, mm=3.0, deg=5.0):
    a = rng.normal(size=3)
    R = axis_angle_to_matrix(a / np.linalg.norm(a) * np.deg2rad(deg)) @ pose.rotation
    return Pose7D.from_matrix(pose.translation + rng.normal(0, mm, 3), R,
                              np.clip(pose.articulation + rng.normal(0, 0.05), 0, np.pi / 2))


def test_vertex_errors():
    assert np.allclose(vertex_errors([[0, 0, 0], [1, 1, 1]], [[3, 4, 0], [1, 1, 1]]), [5, 0])


def test_add_matches_loop_oracle(models, rng):
    for _ in range(20):
        m = models[int(rng.integers(len(models)))]
        p, g = _pose(rng), _pose(rng)
        ref = mean_distance_loop(apply_pose(p, m, "surface"), apply_pose(g, m, "surface"))
        assert abs(add(p, g, m) - ref) < 1e-9
        assert mpvpe(p, g, m) == add(p, g, m)


def test_add_s_matches_loop_oracle(models, rng):
    for _ in range(20):
        m = models[int(rng.integers(len(models)))]
        p, g = _pose(rng), _pose(rng)
        ref = closest_mean_distance_loop(apply_pose(p, m, "surface"), apply_pose(g, m, "surface"))
        assert abs(add_s(p, g, m) - ref) < 1e-9


def test_add_s_never_exceeds_add(models, rng):
    for k in range(10_000):
        m = models[k % len(models)]
        g = _pose(rng)
        p = _near(g, rng) if k % 2 else _pose(rng)
        assert add_s(p, g, m) <= add(p, g, m) + 1e-9


def test_identical_poses_score_zero(models, rng):
    g = _pose(rng)
    assert add(g, g, models[0]) == 0.0 and add_s(g, g, models[0]) == 0.0


def test_translation_offset_gives_exact_add(models, rng):
    g = _pose(rng)
    p = Pose7D.from_matrix(g.translation + [3.0, 4.0, 0.0], g.rotation, g.articulation)
    assert add(p, g, models[3]) == pytest.approx(5.0)


def test_articulation_error_is_penalised(models, rng):
    g = Pose7D.from_matrix([0, 0, 600], np.eye(3), 0.2)
    p = Pose7D.from_matrix([0, 0, 600], np.eye(3), 0.9)
    assert add(p, g, models[0]) > 1.0


def _symmetric_model(m):
    """Model invariant under a half turn about the z axis."""
    Rz = np.diag([-1.0, -1.0, 1.0])
    a = m.part_a[: len(m.part_a) // 2]
    b = m.part_b[: len(m.part_b) // 2]
    return dataclasses.replace(m, part_a=np.concatenate([a, a @ Rz.T]),
                               part_b=np.concatenate([b, b @ Rz.T]))


def test_symmetric_model_add_s_zero_but_add_positive(models):
    m = _symmetric_model(models[0])
    R = random_rotation(np.random.default_rng(3))
    g = Pose7D.from_matrix([10, -20, 700], R, 0.0)
    p = Pose7D.from_matrix([10, -20, 700], R @ np.diag([-1.0, -1.0, 1.0]), 0.0)
    assert add_s(p, g, m) < 1e-9 < add(p, g, m)


def test_class_mismatch(models, rng):
    g = _pose(rng)
    with pytest.raises(ClassMismatch):
        add(g, g, models[0], 1, 2)
    with pytest.raises(ClassMismatch):
        add_s(g, g, models[0], 1, 2)


def _pairs(models, rng, n=60):
    out = []
    for k in range(n):
        c = k % 4
        g = _pose(rng)
        out.append((_near(g, rng, mm=k % 7, deg=k % 5), g, models[c].class_id))
    return out


def test_reports_aggregate_is_weighted_mean(models, rng):
    pairs = _pairs(models, rng)
    rep = mpvpe_report(pairs, models)
    vals = [mpvpe(p, g, models[c]) for p, g, c in pairs]
    assert rep.aggregate == pytest.approx(np.mean(vals))
    assert sum(rep.counts.values()) == len(pairs) and set(rep.per_class) == {0, 1, 2, 3}
    assert add_report(pairs, models).aggregate == pytest.approx(rep.aggregate)
    csv_text = rep.to_csv().splitlines()
    assert csv_text[0] == "class_id,count,mpvpe_mm" and csv_text[-1].startswith("all,60,")
    assert rep.to_dict()["name"] == "mpvpe_mm"


def test_add_s_accuracy_monotone_in_threshold(models, rng):
    pairs = _pairs(models, rng)
    accs = [add_s_accuracy(pairs, models, f).aggregate for f in (0.001, 0.01, 0.05, 0.1, 0.5, 1.0)]
    assert all(a <= b for a, b in zip(accs, accs[1:]))
    assert accs[-1] == 1.0 and all(0.0 <= a <= 1.0 for a in accs)


def test_empty_input(models):
    with pytest.raises(EmptyInput):
        mpvpe_report([], models)
    with pytest.raises(EmptyInput):
        add_s_accuracy([], models)


def test_confusion_matrix():
    M = confusion_matrix([0, 1, 1, 2], [0, 1, 2, 2], 4)
    assert M.shape == (4, 4)
    assert np.allclose(M[0], [1, 0, 0, 0]) and np.allclose(M[2], [0, 0.5, 0.5, 0])
    assert np.allclose(M[3], 0)
    with pytest.raises(LengthMismatch):
        confusion_matrix([0, 1], [0], 2)


def test_confusion_rows_sum_to_one(rng):
    gt = rng.integers(0, 13, 500)
    pred = np.where(rng.uniform(size=500) < 0.8, gt, rng.integers(0, 13, 500))
    M = confusion_matrix(pred, gt, 13)
    assert np.allclose(M.sum(1), 1.0)
