"""Optimization baseline: Adam descent of the stereo keypoint reprojection error.

The loss for one observation is ``0.5 * (e_left + e_right)`` where ``e_c`` is
the mean Euclidean pixel distance between projected model keypoints and the
observed keypoints in camera ``c``, over visible keypoints only. Keypoints that
fall in front of ``Z_MIN`` are projected at ``Z_MIN`` and pay a quadratic
barrier instead of raising.

Adam works on ``[t / 100, r6, theta]`` so translation is stepped in decimeters
and a single learning rate suits all ten values.
"""
from __future__ import annotations

import csv
import time
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import IoFailure, TooFewKeypoints
from .geometry import D_MIN, THETA_MAX, Z_MIN, CameraRig, Pose7D, hinge_rotation_batch
from .synth import frames_of, random_rotation, read_sequence
from .transformer.loss import gram_schmidt, gram_schmidt_backward

MIN_VISIBLE = 4
BARRIER_WEIGHT = 1.0


@dataclass(frozen=True)
class FitConfig:
    init_iters: int = 500
    track_iters: int = 100
    early_stop_px: float = 4.0
    lr: float = 0.01
    restarts: int = 8
    seed: int = 0
    translation_scale: float = 100.0
    init_articulation: float = np.pi / 8

    def __post_init__(self):
        if self.init_iters < 1 or self.track_iters < 1:
            raise ValueError("iteration budgets must be at least 1")
        if self.early_stop_px <= 0:
            raise ValueError("early_stop_px must be positive")
        if self.restarts < 1:
            raise ValueError("restarts must be at least 1")


class FitResult(NamedTuple):
    pose: Pose7D
    iterations: int
    loss_px: float


class _Problem:
    """Fixed data of one fit: canonical keypoints and the observed pixels."""

    def __init__(self, obs, model, rig: CameraRig):
        vis = np.asarray(obs.visible, dtype=bool)
        if vis.sum() < MIN_VISIBLE:
            raise TooFewKeypoints(f"{int(vis.sum())} visible keypoints, need {MIN_VISIBLE}")
        self.rig = rig
        self.obs = np.asarray(obs.keypoints, dtype=float)
        self.w = vis / vis.sum()
        self.kp = np.asarray(model.keypoints, dtype=float)
        self.is_b = np.asarray(model.keypoint_is_b, dtype=bool)
        self.hinge_point = np.asarray(model.hinge_point, dtype=float)
        self.hinge_axis = np.asarray(model.hinge_axis, dtype=float)

    def loss_grad(self, x):
        """Loss, mean pixel error and gradient for pose vectors ``x (B, 10)`` (t in mm)."""
        x = np.atleast_2d(x)
        B = x.shape[0]
        rig = self.rig
        t, theta = x[:, :3], x[:, 9]
        R, gs_cache = gram_schmidt(x[:, 3:9])
        H, dH = hinge_rotation_batch(np.broadcast_to(self.hinge_axis, (B, 3)), theta)
        local = self.kp - self.hinge_point
        rotated = local @ np.swapaxes(H, 1, 2) + self.hinge_point
        y = np.where(self.is_b[:, None], rotated, self.kp)
        X = y @ np.swapaxes(R, 1, 2) + t[:, None, :]

        z = X[..., 2]
        inside = z > Z_MIN
        ze = np.where(inside, z, Z_MIN)
        gX = np.zeros_like(X)
        err = np.zeros(B)
        for col, offset in ((0, 0.0), (2, rig.baseline)):
            xo = X[..., 0] - offset
            u = rig.fx * xo / ze + rig.cx
            v = rig.fy * X[..., 1] / ze + rig.cy
            ru, rv = u - self.obs[:, col], v - self.obs[:, col + 1]
            n = np.hypot(ru, rv)
            err += 0.5 * (n @ self.w)
            scale = 0.5 * self.w / np.where(n > 0, n, 1.0)
            gu, gv = ru * scale, rv * scale
            gX[..., 0] += gu * rig.fx / ze
            gX[..., 1] += gv * rig.fy / ze
            gX[..., 2] -= np.where(inside, (gu * rig.fx * xo + gv * rig.fy * X[..., 1]) / ze**2, 0.0)
        short = np.maximum(Z_MIN - z, 0.0)
        loss = err + BARRIER_WEIGHT * (short**2 @ self.w)
        gX[..., 2] -= 2.0 * BARRIER_WEIGHT * short * self.w

        g = np.empty_like(x)
        g[:, :3] = gX.sum(1)
        gR = np.einsum("bni,bnj->bij", gX, y)
        gy = gX @ R
        dy = local @ np.swapaxes(dH, 1, 2)
        g[:, 9] = np.sum(np.where(self.is_b[:, None], gy * dy, 0.0), axis=(1, 2))
        g[:, 3:9] = gram_schmidt_backward(gR, gs_cache)
        return loss, err, g


def reprojection_loss(pose: Pose7D, obs, model, rig: CameraRig):
    """Stereo reprojection loss in pixels and its gradient w.r.t. the 10 pose values."""
    loss, _, g = _Problem(obs, model, rig).loss_grad(pose.as_vector()[None])
    return float(loss[0]), g[0]


def _kabsch(src, dst):
    """Rotation ``R`` minimising ``sum |R src_i + t - dst_i|^2``."""
    a, b = src - src.mean(0), dst - dst.mean(0)
    U, _, Vt = np.linalg.svd(a.T @ b)
    d = np.sign(np.linalg.det(Vt.T @ U.T)) or 1.0
    return Vt.T @ np.diag([1.0, 1.0, d]) @ U.T


def _triangulated(obs, rig):
    kp = np.asarray(obs.keypoints, dtype=float)
    ok = np.asarray(obs.visible, dtype=bool) & (kp[:, 0] - kp[:, 2] > D_MIN)
    z = rig.fx * rig.baseline / np.where(ok, kp[:, 0] - kp[:, 2], 1.0)
    pts = np.stack([(kp[:, 0] - rig.cx) * z / rig.fx,
                    (0.5 * (kp[:, 1] + kp[:, 3]) - rig.cy) * z / rig.fy, z], axis=-1)
    return pts, ok


def initial_poses(obs, model, rig: CameraRig, config: FitConfig) -> np.ndarray:
    """Start poses for the first frame: one Kabsch alignment plus seeded random rotations."""
    pts, ok = _triangulated(obs, rig)
    kp = np.asarray(model.keypoints, dtype=float)
    theta = config.init_articulation
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0xF17]))
    rotations = []
    part_a = ok & ~np.asarray(model.keypoint_is_b)
    sel = part_a if part_a.sum() >= 3 else ok
    if sel.sum() >= 3:
        rotations.append(_kabsch(kp[sel], pts[sel]))
    while len(rotations) < config.restarts:
        rotations.append(random_rotation(rng))
    if ok.any():
        target, ref = pts[ok].mean(0), kp[ok].mean(0)
    else:
        target, ref = np.array([0.0, 0.0, 500.0]), kp.mean(0)
    out = np.empty((config.restarts, 10))
    for i, R in enumerate(rotations[:config.restarts]):
        out[i, :3] = target - R @ ref
        out[i, 3:9] = np.concatenate([R[:, 0], R[:, 1]])
        out[i, 9] = theta
    return out


def _descend(problem: _Problem, x0, iters, config: FitConfig):
    """Batched Adam from the rows of ``x0``; returns the best visited iterate overall."""
    scale = np.ones(10)
    scale[:3] = 1.0 / config.translation_scale
    p = x0 * scale
    m = np.zeros_like(p)
    v = np.zeros_like(p)
    b1, b2, eps = 0.9, 0.999, 1e-8
    best_x, best_loss, best_err = None, np.inf, np.inf
    used = 0
    for it in range(iters + 1):
        x = p / scale
        loss, err, g = problem.loss_grad(x)
        i = int(np.argmin(loss))
        if loss[i] < best_loss:
            best_x, best_loss, best_err = x[i].copy(), float(loss[i]), float(err[i])
        if best_err < config.early_stop_px or it == iters:
            break
        g = g / scale
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        k = it + 1
        p = p - config.lr * (m / (1 - b1**k)) / (np.sqrt(v / (1 - b2**k)) + eps)
        p[:, 9] = np.clip(p[:, 9], 0.0, THETA_MAX)
        used = k
    return best_x, used, best_err


def fit_pose(init, obs, model, rig: CameraRig, config: FitConfig = FitConfig(),
             mode="init_frame") -> FitResult:
    """Fit a 7D pose to one stereo observation.

    ``init_frame`` descends from ``config.restarts`` start poses for
    ``init_iters`` steps (``init`` is added as an extra start when given);
    ``track_frame`` descends from ``init`` for ``track_iters`` steps. Both stop
    as soon as the mean per-keypoint pixel error drops below ``early_stop_px``.
    """
    problem = _Problem(obs, model, rig)
    if mode == "init_frame":
        x0 = initial_poses(obs, model, rig, config)
        if init is not None:
            x0 = np.vstack([init.as_vector(), x0])
        iters = config.init_iters
    elif mode == "track_frame":
        if init is None:
            raise ValueError("track_frame mode needs an initial pose")
        x0 = init.as_vector()[None]
        iters = config.track_iters
    else:
        raise ValueError(f"unknown mode {mode!r}")
    x0 = x0.copy()
    x0[:, 9] = np.clip(x0[:, 9], 0.0, THETA_MAX)
    x, used, err = _descend(problem, x0, iters, config)
    return FitResult(Pose7D.from_vector(x), used, err)


@dataclass
class FitRow:
    frame: int
    track_id: int
    class_id: int
    pose: Pose7D
    loss_px: float
    iterations: int
    mode: str
    millis: float


def fit_sequence(sequence, models, rig: CameraRig | None = None,
                 config: FitConfig = FitConfig()) -> list[FitRow]:
    """Fit every detection of a sequence, reusing each track's previous pose.

    ``sequence`` is a sequence file path or a list of detections as returned by
    :func:`~stereopose.synth.read_sequence`. Identities come from the sequence's
    track ids. Tracks with too few visible keypoints in a frame are skipped and
    keep their previous pose.
    """
    if isinstance(sequence, (list, tuple)):
        detections = list(sequence)
    else:
        header, detections = read_sequence(sequence)
        if rig is None:
            rig = CameraRig.from_dict(header["rig"])
    rig = rig or CameraRig()
    by_class = {m.class_id: m for m in models}
    previous = {}
    rows = []
    for dets in frames_of(detections):
        frame = dets[0].frame_index
        for det in sorted(dets, key=lambda d: d.track_gt_id):
            obs = det.observation
            model = by_class[obs.class_id]
            prev = previous.get(det.track_gt_id)
            mode = "init_frame" if prev is None else "track_frame"
            t0 = time.perf_counter()
            try:
                res = fit_pose(prev, obs, model, rig, config, mode)
            except TooFewKeypoints:
                continue
            ms = 1e3 * (time.perf_counter() - t0)
            previous[det.track_gt_id] = res.pose
            rows.append(FitRow(frame, det.track_gt_id, obs.class_id, res.pose, res.loss_px,
                               res.iterations, mode, ms))
    return rows


def write_fit_csv(rows, path):
    """Per-frame poses; deterministic for fixed inputs (timings go to :func:`write_timing_log`)."""
    try:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["frame", "track_id", "class", "tx", "ty", "tz", "r1", "r2", "r3", "r4",
                        "r5", "r6", "theta", "loss_px", "iters"])
            for r in rows:
                w.writerow([r.frame, r.track_id, r.class_id]
                           + [f"{v:.9g}" for v in r.pose.as_vector()]
                           + [f"{r.loss_px:.9g}", r.iterations])
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def write_timing_log(rows, path):
    try:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["frame", "track_id", "mode", "iters", "millis"])
            for r in rows:
                w.writerow([r.frame, r.track_id, r.mode, r.iterations, f"{r.millis:.3f}"])
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc
