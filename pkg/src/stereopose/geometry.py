"""Rotations, the articulated world transform, rectified stereo projection and matching.

Conventions: 3D quantities in millimeters, pixels in 2D, articulation in radians.
The left camera sits at the world origin looking down +z; the right camera is
displaced by ``baseline`` along +x with no relative rotation.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import BehindCamera, DegenerateRotation, InvalidRotation, ZeroDisparity

THETA_MAX = np.pi / 2
Z_MIN = 10.0
D_MIN = 0.1
NUM_KEYPOINTS = 12
CLASS_PENALTY = 1e3
MAX_MATCH_COST = 20.0

_DEGENERATE_EPS = 1e-12


@dataclass(frozen=True)
class Pose7D:
    translation: np.ndarray
    rotation6: np.ndarray
    articulation: float

    def __post_init__(self):
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=float).reshape(3))
        object.__setattr__(self, "rotation6", np.asarray(self.rotation6, dtype=float).reshape(6))
        object.__setattr__(self, "articulation", float(self.articulation))

    @classmethod
    def from_vector(cls, v) -> Pose7D:
        v = np.asarray(v, dtype=float)
        if v.shape != (10,):
            raise ValueError(f"expected 10 pose values, got shape {v.shape}")
        return cls(v[:3], v[3:9], v[9])

    @classmethod
    def from_matrix(cls, translation, R, articulation=0.0) -> Pose7D:
        return cls(translation, matrix_to_rot6d(R), articulation)

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.translation, self.rotation6, [self.articulation]])

    @property
    def rotation(self) -> np.ndarray:
        return rot6d_to_matrix(self.rotation6)


def rot6d_to_matrix(r6) -> np.ndarray:
    """Gram-Schmidt map from two 3-vectors to a rotation matrix.

    Accepts shape ``(6,)`` or ``(..., 6)``; the columns of the result are
    ``b1, b2, b3``.
    """
    r6 = np.asarray(r6, dtype=float)
    a1, a2 = r6[..., :3], r6[..., 3:]
    n1 = np.linalg.norm(a1, axis=-1, keepdims=True)
    if np.any(n1 < _DEGENERATE_EPS):
        raise DegenerateRotation("first rotation vector has zero length")
    b1 = a1 / n1
    u2 = a2 - np.sum(b1 * a2, axis=-1, keepdims=True) * b1
    n2 = np.linalg.norm(u2, axis=-1, keepdims=True)
    if np.any(n2 < _DEGENERATE_EPS):
        raise DegenerateRotation("rotation vectors are parallel")
    b2 = u2 / n2
    b3 = np.cross(b1, b2)
    return np.stack([b1, b2, b3], axis=-1)


def check_rotation(R, tol=1e-6):
    R = np.asarray(R, dtype=float)
    if R.shape[-2:] != (3, 3):
        raise InvalidRotation(f"expected 3x3 matrix, got shape {R.shape}")
    eye = np.eye(3)
    err = np.abs(np.swapaxes(R, -1, -2) @ R - eye).max()
    if err > tol or np.any(np.abs(np.linalg.det(R) - 1.0) > tol):
        raise InvalidRotation(f"matrix is not a proper rotation (orthonormality error {err:.3g})")
    return R


def matrix_to_rot6d(R) -> np.ndarray:
    R = check_rotation(R)
    return np.concatenate([R[..., :, 0], R[..., :, 1]], axis=-1)


def skew(v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1], out[..., 0, 2] = -v[..., 2], v[..., 1]
    out[..., 1, 0], out[..., 1, 2] = v[..., 2], -v[..., 0]
    out[..., 2, 0], out[..., 2, 1] = -v[..., 1], v[..., 0]
    return out


def axis_angle_to_matrix(aa) -> np.ndarray:
    """Rodrigues formula; the zero vector maps to the identity. Broadcasts over leading axes."""
    aa = np.asarray(aa, dtype=float)
    angle = np.linalg.norm(aa, axis=-1)[..., None, None]
    K = skew(aa)
    small = angle < 1e-8
    safe = np.where(small, 1.0, angle)
    # Taylor terms near zero keep the map smooth
    s = np.where(small, 1.0 - angle**2 / 6.0, np.sin(safe) / safe)
    c = np.where(small, 0.5 - angle**2 / 24.0, (1.0 - np.cos(safe)) / safe**2)
    return np.eye(3) + s * K + c * (K @ K)


def matrix_to_axis_angle(R) -> np.ndarray:
    """Logarithm map of a single rotation matrix, angle in ``[0, pi]``."""
    R = check_rotation(R)
    cos = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    angle = np.arccos(cos)
    if angle < 1e-8:
        return np.zeros(3)
    if np.pi - angle < 1e-6:
        # near a half turn the antisymmetric part vanishes; read the axis off R + I
        M = (R + np.eye(3)) / 2.0
        k = int(np.argmax(np.diag(M)))
        axis = M[:, k] / np.sqrt(M[k, k])
        return axis / np.linalg.norm(axis) * angle
    w = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    return w / (2.0 * np.sin(angle)) * angle


def hinge_rotation(axis, theta) -> np.ndarray:
    axis = np.asarray(axis, dtype=float)
    theta = np.asarray(theta, dtype=float)
    return axis_angle_to_matrix(axis * theta[..., None])


def articulate(points, is_part_b, hinge_point, hinge_axis, theta) -> np.ndarray:
    """Rotate part-B points by ``theta`` about the hinge line; part-A points are untouched."""
    points = np.asarray(points, dtype=float)
    H = hinge_rotation(hinge_axis, theta)
    rotated = (points - hinge_point) @ H.T + hinge_point
    return np.where(np.asarray(is_part_b)[:, None], rotated, points)


def transform_points(points, is_part_b, hinge_point, hinge_axis, R, t, theta) -> np.ndarray:
    return articulate(points, is_part_b, hinge_point, hinge_axis, theta) @ np.asarray(R).T + t


def hinge_rotation_batch(axes, theta):
    """``(B, 3, 3)`` rotations by ``theta (B,)`` about unit ``axes (B, 3)``, plus their theta-derivative."""
    K = skew(axes)
    K2 = K @ K
    s, c = np.sin(theta)[:, None, None], np.cos(theta)[:, None, None]
    H = np.eye(3) + s * K + (1.0 - c) * K2
    dH = c * K + s * K2
    return H, dH


def transform_points_batch(points, is_part_b, hinge_point, hinge_axis, R, t, theta):
    """Batched :func:`transform_points`: ``points (B, N, 3)``, ``R (B, 3, 3)``, ``t (B, 3)``, ``theta (B,)``.

    Returns ``(posed, articulated)`` where ``articulated`` are the canonical points
    after the hinge rotation but before the rigid transform.
    """
    H, _ = hinge_rotation_batch(hinge_axis, theta)
    local = points - hinge_point[:, None, :]
    rotated = local @ np.swapaxes(H, 1, 2) + hinge_point[:, None, :]
    articulated = np.where(is_part_b[..., None], rotated, points)
    return articulated @ np.swapaxes(R, 1, 2) + t[:, None, :], articulated


def apply_pose(pose: Pose7D, model, points="keypoints") -> np.ndarray:
    """Pose the model's keypoints (``"keypoints"``) or surface samples (``"surface"``)."""
    if points == "keypoints":
        pts, tags = model.keypoints, model.keypoint_is_b
    elif points == "surface":
        pts, tags = model.surface, model.surface_is_b
    else:
        raise ValueError(f"unknown point selector {points!r}")
    return transform_points(pts, tags, model.hinge_point, model.hinge_axis,
                            pose.rotation, pose.translation, pose.articulation)


@dataclass(frozen=True)
class CameraRig:
    fx: float = 1100.0
    fy: float = 1100.0
    cx: float = 576.0
    cy: float = 576.0
    image_width: int = 1152
    image_height: int = 1152
    baseline: float = 64.0

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0 or self.baseline <= 0:
            raise ValueError("focal lengths and baseline must be positive")
        if not (0 <= self.cx < self.image_width and 0 <= self.cy < self.image_height):
            raise ValueError("principal point outside the image")

    def eye_offset(self, eye) -> float:
        if eye == "left":
            return 0.0
        if eye == "right":
            return self.baseline
        raise ValueError(f"eye must be 'left' or 'right', got {eye!r}")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in
                ("fx", "fy", "cx", "cy", "image_width", "image_height", "baseline")}

    @classmethod
    def from_dict(cls, d) -> CameraRig:
        return cls(**d)

    def in_image(self, uv, margin=0.0):
        uv = np.asarray(uv)
        mx, my = margin * self.image_width, margin * self.image_height
        return ((uv[..., 0] >= -mx) & (uv[..., 0] <= self.image_width + mx)
                & (uv[..., 1] >= -my) & (uv[..., 1] <= self.image_height + my))


def project(rig: CameraRig, eye, points3d) -> np.ndarray:
    pts = np.atleast_2d(np.asarray(points3d, dtype=float))
    x = pts[:, 0] - rig.eye_offset(eye)
    z = pts[:, 2]
    bad = np.flatnonzero(z <= Z_MIN)
    if bad.size:
        raise BehindCamera(int(bad[0]))
    out = np.stack([rig.fx * x / z + rig.cx, rig.fy * pts[:, 1] / z + rig.cy], axis=-1)
    return out if np.ndim(points3d) > 1 else out[0]


def triangulate(rig: CameraRig, left, right) -> np.ndarray:
    """Closed-form rectified triangulation; accepts single points or ``(n, 2)`` arrays."""
    left = np.asarray(left, dtype=float)
    right = np.asarray(right, dtype=float)
    d = left[..., 0] - right[..., 0]
    if np.any(d <= D_MIN):
        raise ZeroDisparity(f"disparity must exceed {D_MIN} px")
    z = rig.fx * rig.baseline / d
    x = (left[..., 0] - rig.cx) * z / rig.fx
    y = (0.5 * (left[..., 1] + right[..., 1]) - rig.cy) * z / rig.fy
    return np.stack([x, y, z], axis=-1)


@dataclass
class Detection:
    """One object seen by one camera: box ``(x0, y0, x1, y1)`` plus 12 keypoints."""
    class_id: int
    box: np.ndarray
    keypoints: np.ndarray
    visible: np.ndarray
    score: float = 1.0
    meta: dict = field(default_factory=dict)


@dataclass
class StereoObservation:
    class_id: int
    keypoints: np.ndarray  # (12, 4): u_left, v_left, u_right, v_right
    visible: np.ndarray    # (12,) bool
    box_left: np.ndarray
    box_right: np.ndarray
    score: float = 1.0

    def __post_init__(self):
        self.keypoints = np.asarray(self.keypoints, dtype=float).reshape(NUM_KEYPOINTS, 4)
        self.visible = np.asarray(self.visible, dtype=bool).reshape(NUM_KEYPOINTS)
        self.box_left = np.asarray(self.box_left, dtype=float).reshape(4)
        self.box_right = np.asarray(self.box_right, dtype=float).reshape(4)

    def eye(self, eye) -> Detection:
        cols = slice(0, 2) if eye == "left" else slice(2, 4)
        box = self.box_left if eye == "left" else self.box_right
        return Detection(self.class_id, box.copy(), self.keypoints[:, cols].copy(),
                         self.visible.copy(), self.score)

    def copy(self) -> StereoObservation:
        return StereoObservation(self.class_id, self.keypoints.copy(), self.visible.copy(),
                                 self.box_left.copy(), self.box_right.copy(), self.score)


def match_cost(left: Detection, right: Detection) -> float:
    shared = np.asarray(left.visible) & np.asarray(right.visible)
    if not shared.any():
        return np.inf
    cost = float(np.mean(np.abs(left.keypoints[shared, 1] - right.keypoints[shared, 1])))
    if left.class_id != right.class_id:
        cost += CLASS_PENALTY
    return cost


def match_cost_matrix(left_dets, right_dets) -> np.ndarray:
    C = np.full((len(left_dets), len(right_dets)), np.inf)
    for i, ld in enumerate(left_dets):
        for j, rd in enumerate(right_dets):
            C[i, j] = match_cost(ld, rd)
    return C


def epipolar_match(left_dets, right_dets, rig: CameraRig | None = None, max_cost=MAX_MATCH_COST):
    """Greedily pair left/right detections by vertical keypoint disparity.

    ``rig`` is accepted for interface symmetry; a rectified rig has horizontal
    epipolar lines so the cost does not depend on its intrinsics.
    Returns ``(left_idx, right_idx)`` pairs sorted by left index.
    """
    C = match_cost_matrix(left_dets, right_dets)
    pairs = []
    if C.size == 0:
        return pairs
    # stable order: cost, then left index, then right index
    order = sorted(((C[i, j], i, j) for i in range(C.shape[0]) for j in range(C.shape[1])))
    used_l, used_r = set(), set()
    for c, i, j in order:
        if c > max_cost:
            break
        if i in used_l or j in used_r:
            continue
        used_l.add(i)
        used_r.add(j)
        pairs.append((i, j))
    return sorted(pairs)

