"""Composite pose loss and its gradient.

Per sample::

    L = w_pose   * ||P_hat - P||
      + w_vertex * mean_v ||T(P_hat) v - T(P) v||      (512 surface points)
      + w_kp3d   * mean_k ||K_hat_k - T(P) k||          (12 keypoints)

``P`` is the pose vector in the network's rotation parametrisation and all
distances are in millimeters. The batch loss is the mean over samples.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..geometry import axis_angle_to_matrix, matrix_to_axis_angle, skew, transform_points_batch
from ..instruments import ModelStack
from .config import ModelConfig
from .network import backward, forward
from .tokens import tokenize_records

GS_EPS = 1e-8


def gram_schmidt(r6, eps=GS_EPS):
    """Regularised Gram-Schmidt on ``(B, 6)``; returns ``R (B, 3, 3)`` and a backward cache."""
    a1, a2 = r6[:, :3], r6[:, 3:]
    n1 = np.linalg.norm(a1, axis=1, keepdims=True)
    b1 = a1 / (n1 + eps)
    dot = np.sum(b1 * a2, axis=1, keepdims=True)
    u2 = a2 - dot * b1
    n2 = np.linalg.norm(u2, axis=1, keepdims=True)
    b2 = u2 / (n2 + eps)
    b3 = np.cross(b1, b2)
    return np.stack([b1, b2, b3], axis=-1), (a1, a2, n1, b1, dot, u2, n2, b2)


def gram_schmidt_backward(gR, cache, eps=GS_EPS):
    a1, a2, n1, b1, dot, u2, n2, b2 = cache
    gb1, gb2, gb3 = gR[:, :, 0].copy(), gR[:, :, 1].copy(), gR[:, :, 2]
    # b3 = b1 x b2
    gb1 += np.cross(b2, gb3)
    gb2 += np.cross(gb3, b1)
    # b2 = u2 / (|u2| + eps)
    m2 = n2 + eps
    safe2 = np.where(n2 > 0, n2, 1.0)
    gu2 = gb2 / m2 - u2 * np.sum(u2 * gb2, axis=1, keepdims=True) / (safe2 * m2 * m2)
    # u2 = a2 - (b1 . a2) b1
    gdot = -np.sum(gu2 * b1, axis=1, keepdims=True)
    ga2 = gu2 + gdot * b1
    gb1 = gb1 - dot * gu2 + gdot * a2
    # b1 = a1 / (|a1| + eps)
    m1 = n1 + eps
    safe1 = np.where(n1 > 0, n1, 1.0)
    ga1 = gb1 / m1 - a1 * np.sum(a1 * gb1, axis=1, keepdims=True) / (safe1 * m1 * m1)
    return np.concatenate([ga1, ga2], axis=1)


def rodrigues_backward(gR, aa, R):
    """Gradient of ``sum(gR * exp([aa]x))`` w.r.t. ``aa (B, 3)``."""
    n2 = np.sum(aa * aa, axis=1)
    small = n2 < 1e-12
    Kv = skew(aa)
    I_R = np.eye(3) - R
    out = np.empty_like(aa)
    for i in range(3):
        e = np.zeros(3)
        e[i] = 1.0
        w = np.cross(aa, I_R[:, :, i])
        dR = (aa[:, i, None, None] * Kv + skew(w)) @ R / np.where(small, 1.0, n2)[:, None, None]
        dR = np.where(small[:, None, None], skew(e), dR)
        out[:, i] = np.sum(gR * dR, axis=(1, 2))
    return out


def rotation_forward(raw, mode):
    if mode == "sixd":
        R, cache = gram_schmidt(raw)
        return R, ("sixd", cache)
    R = axis_angle_to_matrix(raw)
    return R, ("axis_angle3", (raw, R))


def rotation_backward(gR, cache):
    mode, c = cache
    if mode == "sixd":
        return gram_schmidt_backward(gR, c)
    return rodrigues_backward(gR, *c)


def pose_target(pose, config: ModelConfig) -> np.ndarray:
    """Ground-truth pose vector in the network's rotation parametrisation."""
    if config.rotation_mode == "sixd":
        rot = pose.rotation6
    else:
        rot = matrix_to_axis_angle(pose.rotation)
    return np.concatenate([pose.translation, rot, [pose.articulation]])


def decode_rotation(pose_vec, config: ModelConfig):
    """Rotation matrices ``(B, 3, 3)`` from predicted pose vectors."""
    R, _ = rotation_forward(np.atleast_2d(pose_vec)[:, 3:3 + config.rotation_dim],
                            config.rotation_mode)
    return R


@dataclass
class Targets:
    """Batch of supervision: pose vectors, posed GT surface/keypoints and model rows."""
    pose: np.ndarray        # (B, P)
    surface: np.ndarray     # (B, Nv, 3) posed ground-truth surface
    keypoints: np.ndarray   # (B, 12, 3) posed ground-truth keypoints
    rows: np.ndarray        # (B,) row into the ModelStack


def make_targets(records, stack: ModelStack, config: ModelConfig) -> Targets:
    rows = stack.rows([r.class_id for r in records])
    pose = np.stack([pose_target(r.pose, config) for r in records])
    R = np.stack([r.pose.rotation for r in records])
    t = np.stack([r.pose.translation for r in records])
    theta = np.array([r.pose.articulation for r in records])
    surf, _ = transform_points_batch(stack.surface[rows], stack.surface_is_b[rows],
                                     stack.hinge_point[rows], stack.hinge_axis[rows], R, t, theta)
    kp = np.stack([np.asarray(r.keypoints3d, dtype=float) for r in records])
    return Targets(pose, surf, kp, rows)


def _mean_norm(diff):
    """Mean Euclidean norm over axis 1 and its gradient w.r.t. ``diff``."""
    d = np.linalg.norm(diff, axis=-1)
    safe = np.where(d > 0, d, 1.0)
    grad = np.where((d > 0)[..., None], diff / safe[..., None], 0.0) / diff.shape[1]
    return d.mean(axis=1), grad


def composite_loss(kp_pred, pose_pred, targets: Targets, stack: ModelStack,
                   config: ModelConfig):
    """Mean composite loss over the batch.

    Returns ``(loss, terms, d_kp, d_pose)``; ``terms`` holds the batch-mean
    pose / vertex / keypoint terms (unweighted).
    """
    B = pose_pred.shape[0]
    rd = config.rotation_dim
    rows = targets.rows

    diff_p = pose_pred - targets.pose
    pose_term = np.linalg.norm(diff_p, axis=1)
    safe = np.where(pose_term > 0, pose_term, 1.0)
    g_pose = np.where((pose_term > 0)[:, None], diff_p / safe[:, None], 0.0) * config.w_pose

    t = pose_pred[:, :3]
    theta = pose_pred[:, -1]
    R, rcache = rotation_forward(pose_pred[:, 3:3 + rd], config.rotation_mode)
    pts, art = transform_points_batch(stack.surface[rows], stack.surface_is_b[rows],
                                      stack.hinge_point[rows], stack.hinge_axis[rows], R, t, theta)
    vert_term, gX = _mean_norm(pts - targets.surface)
    gX *= config.w_vertex

    kp_term, g_kp = _mean_norm(kp_pred - targets.keypoints)
    g_kp *= config.w_kp3d

    # back through X = R y + t with y the articulated canonical points
    g_pose[:, :3] += gX.sum(1)
    gR = np.einsum("bni,bnj->bij", gX, art)
    gy = gX @ R
    axes = stack.hinge_axis[rows]
    K = skew(axes)
    c, s = np.cos(theta)[:, None, None], np.sin(theta)[:, None, None]
    dH = c * K + s * (K @ K)
    local = stack.surface[rows] - stack.hinge_point[rows][:, None, :]
    dy = local @ np.swapaxes(dH, 1, 2)
    g_theta = np.sum(np.where(stack.surface_is_b[rows][..., None], gy * dy, 0.0), axis=(1, 2))
    g_pose[:, -1] += g_theta
    g_pose[:, 3:3 + rd] += rotation_backward(gR, rcache)

    per_sample = config.w_pose * pose_term + config.w_vertex * vert_term + config.w_kp3d * kp_term
    loss = float(per_sample.mean())
    terms = {"pose": float(pose_term.mean()), "vertex": float(vert_term.mean()),
             "kp3d": float(kp_term.mean())}
    return loss, terms, g_kp / B, g_pose / B


def loss_and_grad(params, tokens, targets: Targets, stack: ModelStack, config: ModelConfig):
    """Batch loss, term breakdown and parameter gradients."""
    kp, pose, cache = forward(params, tokens, config, keep=True)
    loss, terms, d_kp, d_pose = composite_loss(kp, pose, targets, stack, config)
    return loss, terms, backward(params, cache, d_kp, d_pose, config)


def loss(params, record, model, config: ModelConfig, rig):
    """Single-record loss and gradients (convenience wrapper around :func:`loss_and_grad`)."""
    stack = ModelStack([model])
    targets = make_targets([record], stack, config)
    tokens = tokenize_records([record], config, rig)
    value, _, grads = loss_and_grad(params, tokens, targets, stack, config)
    return value, grads
