"""Random 7D poses, stereo keypoint datasets, tracking sequences and a mock detector.

Dataset file (text, one record per line, header line first)::

    {"format": "stereopose-dataset", "schema_version": 1, ...}      # JSON header
    class_id  tx ty tz  r1..r6  theta  12 x (uL vL uR vR vis)  12 x (X Y Z)

Sequence file: same header convention (``"format": "stereopose-sequence"``);
each line is one detection::

    frame_index track_gt_id score  box_left[4] box_right[4]  <dataset record core>

Floats are written with 9 significant digits, fields are space separated.
"""
from __future__ import annotations

import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.interpolate import PchipInterpolator

from .errors import FrustumExhausted, IoFailure
from .geometry import (NUM_KEYPOINTS, THETA_MAX, Z_MIN, CameraRig, Pose7D, StereoObservation,
                       apply_pose, axis_angle_to_matrix, matrix_to_rot6d, project,
                       rot6d_to_matrix)
from .instruments import model_set_digest

SCHEMA_VERSION = 1
MAX_ATTEMPTS = 100
RECORD_FIELDS = 1 + 10 + NUM_KEYPOINTS * 5 + NUM_KEYPOINTS * 3
SEQUENCE_PREFIX = 3 + 8


@dataclass(frozen=True)
class PoseSampler:
    x_range: tuple = (-200.0, 200.0)
    y_range: tuple = (-200.0, 200.0)
    z_range: tuple = (400.0, 1500.0)
    theta_max: float = THETA_MAX
    seed: int = 0


@dataclass(frozen=True)
class NoiseConfig:
    keypoint_sigma: float = 2.0
    dropout_prob: float = 0.05
    misclass_prob: float = 0.02
    score_range: tuple = (0.1, 1.0)

    def __post_init__(self):
        if self.keypoint_sigma < 0:
            raise ValueError("keypoint_sigma must be non-negative")
        for p in (self.dropout_prob, self.misclass_prob):
            if not 0.0 <= p <= 1.0:
                raise ValueError("probabilities must lie in [0, 1]")


@dataclass
class DatasetRecord:
    class_id: int
    pose: Pose7D
    observation: StereoObservation
    keypoints3d: np.ndarray


def random_rotation(rng) -> np.ndarray:
    """Haar-uniform rotation from a normalised Gaussian quaternion."""
    q = rng.normal(size=4)
    w, x, y, z = q / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def keypoints_in_view(rig, kp3d, margin=0.0) -> bool:
    if np.any(kp3d[:, 2] <= Z_MIN):
        return False
    return bool(rig.in_image(project(rig, "left", kp3d), margin).all()
                and rig.in_image(project(rig, "right", kp3d), margin).all())


def sample_pose(sampler: PoseSampler, model, rig: CameraRig, rng=None) -> Pose7D:
    """Uniform translation box, Haar rotation, uniform articulation; rejects poses leaving either image."""
    if rng is None:
        rng = np.random.default_rng(sampler.seed)
    for _ in range(MAX_ATTEMPTS):
        t = np.array([rng.uniform(*sampler.x_range), rng.uniform(*sampler.y_range),
                      rng.uniform(*sampler.z_range)])
        R = random_rotation(rng)
        theta = rng.uniform(0.0, sampler.theta_max)
        pose = Pose7D(t, matrix_to_rot6d(R), theta)
        if keypoints_in_view(rig, apply_pose(pose, model, "keypoints")):
            return pose
    raise FrustumExhausted(f"no in-view pose after {MAX_ATTEMPTS} attempts")


def _box(uv):
    return np.array([uv[:, 0].min(), uv[:, 1].min(), uv[:, 0].max(), uv[:, 1].max()])


def observe(pose: Pose7D, model, rig: CameraRig, score=1.0):
    """Exact stereo projection of a posed model: keypoints, visibility and surface boxes."""
    kp3d = apply_pose(pose, model, "keypoints")
    surf = apply_pose(pose, model, "surface")
    uv_l, uv_r = project(rig, "left", kp3d), project(rig, "right", kp3d)
    visible = rig.in_image(uv_l) & rig.in_image(uv_r)
    obs = StereoObservation(model.class_id, np.hstack([uv_l, uv_r]), visible,
                            _box(project(rig, "left", surf)), _box(project(rig, "right", surf)),
                            score)
    return obs, kp3d


def perturb_observation(obs: StereoObservation, noise: NoiseConfig, rng, n_classes=None):
    """Mock detector: Gaussian pixel noise, keypoint dropout, class flips and a random score."""
    out = obs.copy()
    vis = out.visible
    if noise.keypoint_sigma > 0:
        jitter = rng.normal(0.0, noise.keypoint_sigma, size=out.keypoints.shape)
        out.keypoints = np.where(vis[:, None], out.keypoints + jitter, out.keypoints)
    if noise.dropout_prob > 0:
        out.visible = vis & (rng.uniform(size=NUM_KEYPOINTS) >= noise.dropout_prob)
    if noise.misclass_prob > 0 and n_classes and n_classes > 1:
        if rng.uniform() < noise.misclass_prob:
            other = int(rng.integers(n_classes - 1))
            out.class_id = other if other < obs.class_id else other + 1
    lo, hi = noise.score_range
    out.score = float(rng.uniform(lo, hi)) if hi > lo else float(lo)
    return out


def record_rng(seed, index):
    return np.random.default_rng(np.random.SeedSequence([seed, index]))


def make_record(models, rig, sampler, noise, index) -> DatasetRecord:
    rng = record_rng(sampler.seed, index)
    model = models[int(rng.integers(len(models)))]
    pose = sample_pose(sampler, model, rig, rng)
    obs, kp3d = observe(pose, model, rig)
    if noise is not None:
        obs = perturb_observation(obs, noise, rng, len(models))
    return DatasetRecord(model.class_id, pose, obs, kp3d)


def _fmt(values):
    return " ".join(f"{v:.9g}" for v in values)


def format_record(rec: DatasetRecord, observed_class=False) -> str:
    """Dataset lines carry the true class; sequence lines carry the detector's label."""
    kp = np.column_stack([rec.observation.keypoints, rec.observation.visible.astype(float)])
    cls = rec.observation.class_id if observed_class else rec.class_id
    return (f"{cls} {_fmt(rec.pose.as_vector())} "
            f"{_fmt(kp.ravel())} {_fmt(np.asarray(rec.keypoints3d).ravel())}")


def parse_record(tokens, box_left=None, box_right=None, score=1.0, true_class=None):
    if len(tokens) != RECORD_FIELDS:
        raise IoFailure(f"record has {len(tokens)} fields, expected {RECORD_FIELDS}")
    class_id = int(tokens[0])
    vals = np.array(tokens[1:], dtype=float)
    pose = Pose7D.from_vector(vals[:10])
    kp = vals[10:10 + 5 * NUM_KEYPOINTS].reshape(NUM_KEYPOINTS, 5)
    kp3d = vals[10 + 5 * NUM_KEYPOINTS:].reshape(NUM_KEYPOINTS, 3)
    vis = kp[:, 4] > 0.5
    if box_left is None:
        box_left = _box(kp[vis, 0:2]) if vis.any() else np.zeros(4)
        box_right = _box(kp[vis, 2:4]) if vis.any() else np.zeros(4)
    obs = StereoObservation(class_id, kp[:, :4], vis, box_left, box_right, score)
    return DatasetRecord(class_id if true_class is None else true_class, pose, obs, kp3d)


def _format_chunk(args):
    models, rig, sampler, noise, lo, hi = args
    return [format_record(make_record(models, rig, sampler, noise, i)) for i in range(lo, hi)]


def resolve_workers(workers=None) -> int:
    if workers is None:
        workers = int(os.environ.get("STEREOPOSE_THREADS", "1"))
    return max(1, int(workers))


def _header(kind, rig, sampler, models, **extra):
    head = {"format": f"stereopose-{kind}", "schema_version": SCHEMA_VERSION,
            "rig": rig.to_dict(), "seed": sampler.seed if sampler else None,
            "sampler": asdict(sampler) if sampler else None,
            "models_digest": model_set_digest(models), "classes": len(models)}
    head.update(extra)
    return json.dumps(head, sort_keys=True)


def generate_dataset(models, rig, sampler, n, noise=None, path=None, workers=None,
                     chunk=2000, **meta):
    """Generate ``n`` records; per-record RNG streams keep output independent of ``workers``."""
    if n < 1:
        raise ValueError("n must be at least 1")
    workers = resolve_workers(workers)
    jobs = [(models, rig, sampler, noise, lo, min(lo + chunk, n)) for lo in range(0, n, chunk)]
    header = _header("dataset", rig, sampler, models, n=n,
                     noise=asdict(noise) if noise is not None else None, **meta)
    try:
        fh = open(path, "w")
    except OSError as exc:
        raise IoFailure(f"cannot write dataset {path}: {exc}") from exc
    with fh:
        fh.write(header + "\n")
        if workers == 1:
            for job in jobs:
                fh.write("\n".join(_format_chunk(job)) + "\n")
        else:
            with ProcessPoolExecutor(workers) as pool:
                for lines in pool.map(_format_chunk, jobs):
                    fh.write("\n".join(lines) + "\n")
    return Path(path)


def generate_records(models, rig, sampler, n, noise=None) -> list[DatasetRecord]:
    """In-memory variant of :func:`generate_dataset` (same records, full precision)."""
    return [make_record(models, rig, sampler, noise, i) for i in range(n)]


def read_header(path) -> dict:
    try:
        with open(path) as fh:
            return json.loads(fh.readline())
    except (OSError, ValueError) as exc:
        raise IoFailure(f"cannot read header of {path}: {exc}") from exc


def read_dataset(path):
    """Return ``(header, records)``."""
    try:
        with open(path) as fh:
            header = json.loads(fh.readline())
            if header.get("format") != "stereopose-dataset":
                raise IoFailure(f"{path} is not a dataset file")
            records = [parse_record(line.split()) for line in fh if line.strip()]
    except OSError as exc:
        raise IoFailure(f"cannot read dataset {path}: {exc}") from exc
    return header, records


# ---------------------------------------------------------------- sequences

@dataclass(frozen=True)
class MotionConfig:
    """Trajectory shape for :func:`generate_sequence`.

    ``mode`` is ``"spline"`` (random C1 paths through knots every
    ``knot_spacing`` frames), ``"static"`` or ``"crossing"`` (objects swap
    sides horizontally, passing each other mid-sequence).
    """
    mode: str = "spline"
    knot_spacing: int = 15
    step_deg: float = 12.0
    step_mm: float = 40.0
    seed: int = 0


@dataclass
class SequenceDetection:
    frame_index: int
    track_gt_id: int
    record: DatasetRecord

    @property
    def observation(self):
        return self.record.observation


def _knot_poses(rng, model, rig, n_knots, motion, center):
    R = random_rotation(rng)
    t = np.array(center, dtype=float)
    poses = []
    for k in range(n_knots):
        if k:
            axis = rng.normal(size=3)
            axis /= np.linalg.norm(axis)
            R = axis_angle_to_matrix(axis * np.deg2rad(motion.step_deg)) @ R
            t = t + rng.normal(size=3) * motion.step_mm
            t[2] = np.clip(t[2], 600.0, 1200.0)
            t[:2] = np.clip(t[:2], -120.0, 120.0)
        poses.append(np.concatenate([t, matrix_to_rot6d(R), [rng.uniform(0.2, 1.2)]]))
    return np.array(poses)


def _trajectory(rng, model, rig, n_frames, motion, obj, n_objects):
    frames = np.arange(n_frames, dtype=float)
    if motion.mode == "static":
        t = np.array([0.0, 0.0, 800.0])
        R = random_rotation(rng)
        base = np.concatenate([t, matrix_to_rot6d(R), [0.5]])
        return np.tile(base, (n_frames, 1))
    if motion.mode == "crossing":
        # horizontal sweep with smoothstep easing; objects pass with a vertical offset
        side = 1.0 if obj % 2 == 0 else -1.0
        s = frames / (n_frames - 1)
        ease = 3 * s**2 - 2 * s**3
        x = side * (-110.0 + 220.0 * ease)
        y = np.full(n_frames, 12.0 * side)
        z = np.full(n_frames, 800.0)
        R0 = random_rotation(rng)
        r6 = np.tile(matrix_to_rot6d(R0), (n_frames, 1))
        theta = np.full((n_frames, 1), 0.4)
        return np.column_stack([x, y, z, r6, theta])
    n_knots = max(2, int(np.ceil((n_frames - 1) / motion.knot_spacing)) + 1)
    center = [rng.uniform(-80, 80), rng.uniform(-80, 80), rng.uniform(700, 1100)]
    knots = _knot_poses(rng, model, rig, n_knots, motion, center)
    knot_frames = np.linspace(0, n_frames - 1, n_knots)
    return PchipInterpolator(knot_frames, knots, axis=0)(frames)


def generate_sequence(models, rig, n_frames, n_objects, motion=MotionConfig(), noise=None,
                      occlusion_windows=(), seed=0, class_ids=None, path=None, **meta):
    """Multi-object detection sequence with ground-truth identities.

    ``occlusion_windows`` holds ``(object_index, first_frame, last_frame, score)``
    tuples; inside a window the detection's score is forced to ``score`` and half
    of its keypoints are hidden. Returns the list of :class:`SequenceDetection`
    and writes the sequence file when ``path`` is given.
    """
    if n_frames < 2:
        raise ValueError("n_frames must be at least 2")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5E0]))
    if class_ids is None:
        class_ids = rng.choice(len(models), size=n_objects, replace=n_objects > len(models))
    trajectories = [_trajectory(rng, models[class_ids[o]], rig, n_frames, motion, o, n_objects)
                    for o in range(n_objects)]
    windows = [tuple(w) for w in occlusion_windows]
    out = []
    for f in range(n_frames):
        for o in range(n_objects):
            model = models[int(class_ids[o])]
            v = trajectories[o][f].copy()
            v[9] = np.clip(v[9], 0.0, THETA_MAX)
            # spline mixes of rot6 stay well-conditioned but are not orthonormal
            pose = Pose7D(v[:3], matrix_to_rot6d(rot6d_to_matrix(v[3:9])), v[9])
            obs, kp3d = observe(pose, model, rig, score=0.95)
            frng = np.random.default_rng(np.random.SeedSequence([seed, f, o]))
            if noise is not None:
                obs = perturb_observation(obs, noise, frng, len(models))
            for obj, lo, hi, score in windows:
                if obj == o and lo <= f <= hi:
                    obs.score = float(score)
                    obs.visible = obs.visible & (frng.uniform(size=NUM_KEYPOINTS) >= 0.5)
            out.append(SequenceDetection(f, o, DatasetRecord(model.class_id, pose, obs, kp3d)))
    if path is not None:
        write_sequence(out, path, rig, models, seed=seed, n_frames=n_frames,
                       n_objects=n_objects, motion=asdict(motion),
                       object_classes=[int(c) for c in class_ids],
                       noise=asdict(noise) if noise is not None else None,
                       occlusion_windows=[list(w) for w in windows], **meta)
    return out


def write_sequence(detections, path, rig, models, **meta):
    header = _header("sequence", rig, None, models, **meta)
    try:
        with open(path, "w") as fh:
            fh.write(header + "\n")
            for d in detections:
                obs = d.observation
                fh.write(f"{d.frame_index} {d.track_gt_id} {obs.score:.9g} "
                         f"{_fmt(obs.box_left)} {_fmt(obs.box_right)} "
                         f"{format_record(d.record, observed_class=True)}\n")
    except OSError as exc:
        raise IoFailure(f"cannot write sequence {path}: {exc}") from exc
    return Path(path)


def read_sequence(path):
    """Return ``(header, detections)``; detections are ordered by frame."""
    try:
        with open(path) as fh:
            header = json.loads(fh.readline())
            if header.get("format") != "stereopose-sequence":
                raise IoFailure(f"{path} is not a sequence file")
            classes = header.get("object_classes")
            dets = []
            for line in fh:
                tok = line.split()
                if not tok:
                    continue
                vals = np.array(tok[2:SEQUENCE_PREFIX], dtype=float)
                gt = int(tok[1])
                true_class = classes[gt] if classes is not None else None
                rec = parse_record(tok[SEQUENCE_PREFIX:], vals[1:5], vals[5:9], float(vals[0]),
                                   true_class)
                dets.append(SequenceDetection(int(tok[0]), gt, rec))
    except OSError as exc:
        raise IoFailure(f"cannot read sequence {path}: {exc}") from exc
    return header, dets


def frames_of(detections):
    """Group detections by frame index, preserving order."""
    frames = {}
    for d in detections:
        frames.setdefault(d.frame_index, []).append(d)
    return [frames[k] for k in sorted(frames)]
