"""Temporal stage: Kalman box tracks, two-stage score-aware association, 1€ keypoint
smoothing and class voting, run per eye and paired across eyes by epipolar matching.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import IoFailure, NonMonotonicTime, SingularInnovation
from .geometry import NUM_KEYPOINTS, CameraRig, Detection, StereoObservation, epipolar_match

BOX_MIN = 1e-3


@dataclass(frozen=True)
class TrackerConfig:
    score_high: float = 0.6
    score_low: float = 0.1
    iou_first: float = 0.3
    iou_second: float = 0.5
    max_age: int = 30
    min_cutoff: float = 1.0
    beta: float = 0.007
    d_cutoff: float = 1.0
    rate: float = 30.0
    class_count: int = 13
    measurement_noise: float = 4.0
    q_position: float = 1.0
    q_velocity: float = 0.25

    def __post_init__(self):
        if not 0.0 <= self.score_low < self.score_high <= 1.0:
            raise ValueError("need 0 <= score_low < score_high <= 1")
        for v in (self.iou_first, self.iou_second):
            if not 0.0 < v < 1.0:
                raise ValueError("IoU thresholds must lie in (0, 1)")
        if self.max_age < 0 or self.rate <= 0:
            raise ValueError("max_age must be non-negative and rate positive")


# ---------------------------------------------------------------- 1€ filter

@dataclass
class OneEuroState:
    x_hat: np.ndarray | float | None = None
    dx_hat: np.ndarray | float = 0.0
    t_prev: float | None = None


def smoothing_factor(cutoff, period):
    tau = 1.0 / (2.0 * np.pi * cutoff)
    return 1.0 / (1.0 + tau / period)


def one_euro_step(state: OneEuroState, x, t, cfg: TrackerConfig = TrackerConfig()):
    """Filter one sample (scalar or array) at time ``t`` seconds; updates ``state`` in place."""
    x = np.asarray(x, dtype=float)
    if state.t_prev is None:
        state.x_hat, state.dx_hat, state.t_prev = x.copy(), np.zeros_like(x), t
        return x.copy()
    period = t - state.t_prev
    if period <= 0:
        raise NonMonotonicTime(f"time {t} does not follow {state.t_prev}")
    dx = (x - state.x_hat) / period
    a_d = smoothing_factor(cfg.d_cutoff, period)
    state.dx_hat = a_d * dx + (1.0 - a_d) * state.dx_hat
    a = smoothing_factor(cfg.min_cutoff + cfg.beta * np.abs(state.dx_hat), period)
    state.x_hat = a * x + (1.0 - a) * state.x_hat
    state.t_prev = t
    return np.array(state.x_hat, copy=True)


class KeypointSmoother:
    """Independent 1€ filters for every keypoint coordinate; hidden keypoints hold."""

    def __init__(self, n=NUM_KEYPOINTS, dims=2):
        self.states = [OneEuroState() for _ in range(n)]
        self.value = np.full((n, dims), np.nan)

    def step(self, keypoints, visible, t, cfg):
        for k in np.flatnonzero(visible):
            self.value[k] = one_euro_step(self.states[k], keypoints[k], t, cfg)
        return self.value.copy()


# ---------------------------------------------------------------- Kalman

def box_to_state(box):
    x0, y0, x1, y1 = np.asarray(box, dtype=float)
    return np.array([(x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0])


def state_to_box(s):
    cx, cy, w, h = s[:4]
    return np.array([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2])


_F = np.eye(8)
_F[:4, 4:] = np.eye(4)
_H = np.eye(4, 8)


@dataclass
class Track:
    id: int
    mean: np.ndarray
    cov: np.ndarray
    class_votes: np.ndarray
    age: int = 0
    time_since_update: int = 0
    hits: int = 1
    score: float = 1.0
    keypoints: np.ndarray = field(default_factory=lambda: np.full((NUM_KEYPOINTS, 2), np.nan))
    visible: np.ndarray = field(default_factory=lambda: np.zeros(NUM_KEYPOINTS, dtype=bool))
    smoother: KeypointSmoother = field(default_factory=KeypointSmoother)
    meta: dict = field(default_factory=dict)

    @property
    def box(self):
        return state_to_box(self.mean)

    @property
    def class_id(self) -> int:
        return class_vote(self.class_votes)


def class_vote(votes) -> int:
    """Majority class; ties go to the lowest class id."""
    return int(np.argmax(votes))


def new_track(track_id, det: Detection, config: TrackerConfig) -> Track:
    mean = np.concatenate([box_to_state(det.box), np.zeros(4)])
    r = config.measurement_noise
    cov = np.diag([r, r, r, r, 100.0, 100.0, 100.0, 100.0])
    votes = np.zeros(config.class_count)
    votes[det.class_id] += 1.0
    return Track(track_id, mean, cov, votes, score=det.score, meta=dict(det.meta))


def kalman_predict(track: Track, config: TrackerConfig = TrackerConfig()):
    """Constant-velocity step; returns the predicted box."""
    Q = np.diag([config.q_position] * 4 + [config.q_velocity] * 4)
    track.mean = _F @ track.mean
    track.cov = _F @ track.cov @ _F.T + Q
    track.cov = 0.5 * (track.cov + track.cov.T)
    track.mean[2:4] = np.maximum(track.mean[2:4], BOX_MIN)
    track.age += 1
    track.time_since_update += 1
    return track.box


def _cholesky(S):
    try:
        return np.linalg.cholesky(S)
    except np.linalg.LinAlgError:
        S = 0.5 * (S + S.T) + 1e-6 * np.eye(len(S))
        try:
            return np.linalg.cholesky(S)
        except np.linalg.LinAlgError as exc:
            raise SingularInnovation("innovation covariance is not positive definite") from exc


def kalman_update(track: Track, box, R_noise=4.0):
    """Standard Kalman correction with a box measurement (Joseph form)."""
    z = box_to_state(box)
    P = track.cov
    S = _H @ P @ _H.T + R_noise * np.eye(4)
    L = _cholesky(S)
    PHt = P @ _H.T
    K = np.linalg.solve(L.T, np.linalg.solve(L, PHt.T)).T
    track.mean = track.mean + K @ (z - _H @ track.mean)
    IKH = np.eye(8) - K @ _H
    P = IKH @ P @ IKH.T + R_noise * K @ K.T
    track.cov = 0.5 * (P + P.T)
    track.mean[2:4] = np.maximum(track.mean[2:4], BOX_MIN)
    track.time_since_update = 0
    track.hits += 1
    return track.mean.copy()


# ---------------------------------------------------------------- association

def iou_matrix(boxes_a, boxes_b) -> np.ndarray:
    a = np.asarray(boxes_a, dtype=float).reshape(-1, 4)
    b = np.asarray(boxes_b, dtype=float).reshape(-1, 4)
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    inter = np.prod(np.clip(rb - lt, 0.0, None), axis=-1)
    area_a = np.prod(a[:, 2:] - a[:, :2], axis=-1)
    area_b = np.prod(b[:, 2:] - b[:, :2], axis=-1)
    union = area_a[:, None] + area_b[None, :] - inter
    return np.divide(inter, union, out=np.zeros_like(inter), where=union > 0)


def greedy_match(iou, track_ids, threshold):
    """Repeatedly take the highest-IoU pair; ties go to the lower track id, then lower detection index."""
    order = sorted(((-iou[i, j], track_ids[i], j, i) for i in range(iou.shape[0])
                    for j in range(iou.shape[1]) if iou[i, j] >= threshold))
    used_t, used_d, pairs = set(), set(), []
    for _, _, j, i in order:
        if i in used_t or j in used_d:
            continue
        used_t.add(i)
        used_d.add(j)
        pairs.append((i, j))
    return pairs


def associate(tracks, detections, config: TrackerConfig = TrackerConfig()):
    """Two-stage association of (already predicted) tracks with detections.

    Returns ``(matches, unmatched_tracks, new_track_candidates)`` as index lists:
    ``matches`` holds ``(track_index, detection_index)`` pairs.
    """
    scores = np.array([d.score for d in detections], dtype=float)
    high = [j for j in range(len(detections)) if scores[j] >= config.score_high]
    low = [j for j in range(len(detections)) if config.score_low <= scores[j] < config.score_high]
    ids = [t.id for t in tracks]
    track_boxes = np.array([t.box for t in tracks]).reshape(-1, 4)
    det_boxes = np.array([d.box for d in detections]).reshape(-1, 4)

    matches = []
    iou1 = iou_matrix(track_boxes, det_boxes[high])
    for i, jj in greedy_match(iou1, ids, config.iou_first):
        matches.append((i, high[jj]))
    matched_t = {i for i, _ in matches}
    rest = [i for i in range(len(tracks)) if i not in matched_t]
    iou2 = iou_matrix(track_boxes[rest], det_boxes[low])
    for ii, jj in greedy_match(iou2, [ids[i] for i in rest], config.iou_second):
        matches.append((rest[ii], low[jj]))
    matched_t = {i for i, _ in matches}
    matched_d = {j for _, j in matches}
    unmatched = [i for i in range(len(tracks)) if i not in matched_t]
    new = [j for j in high if j not in matched_d]
    return sorted(matches), unmatched, new


# ---------------------------------------------------------------- sessions

class TrackerSession:
    """Single-eye multi-object tracker."""

    def __init__(self, config: TrackerConfig = TrackerConfig()):
        self.config = config
        self.tracks: list[Track] = []
        self.next_id = 1
        self.frame = -1

    def step(self, detections, t=None) -> list[Track]:
        """Advance one frame; returns the tracks updated in this frame, by id."""
        cfg = self.config
        self.frame += 1
        t = self.frame / cfg.rate if t is None else t
        for tr in self.tracks:
            kalman_predict(tr, cfg)
        matches, unmatched, new = associate(self.tracks, detections, cfg)
        updated = []
        for i, j in matches:
            tr, det = self.tracks[i], detections[j]
            kalman_update(tr, det.box, cfg.measurement_noise)
            self._observe(tr, det, t)
            updated.append(tr)
        for j in new:
            tr = new_track(self.next_id, detections[j], cfg)
            self.next_id += 1
            self._observe(tr, detections[j], t, vote=False)
            self.tracks.append(tr)
            updated.append(tr)
        self.tracks = [tr for tr in self.tracks if tr.time_since_update <= cfg.max_age]
        return sorted(updated, key=lambda tr: tr.id)

    def _observe(self, tr: Track, det: Detection, t, vote=True):
        if vote:
            tr.class_votes[det.class_id] += 1.0
        vis = np.asarray(det.visible, dtype=bool)
        tr.keypoints = tr.smoother.step(np.asarray(det.keypoints, dtype=float), vis, t, self.config)
        tr.visible = vis.copy()
        tr.score = det.score
        tr.meta = dict(det.meta)


def _as_detection(tr: Track) -> Detection:
    return Detection(tr.class_id, tr.box, np.nan_to_num(tr.keypoints), tr.visible.copy(),
                     tr.score, dict(tr.meta, track_id=tr.id))


@dataclass(frozen=True)
class TrackedObject:
    frame: int
    track_id: int
    class_id: int
    observation: StereoObservation
    meta: dict


class StereoTracker:
    """Independent left/right sessions, paired each frame along epipolar lines."""

    def __init__(self, config: TrackerConfig = TrackerConfig(), rig: CameraRig | None = None):
        self.config = config
        self.rig = rig or CameraRig()
        self.left = TrackerSession(config)
        self.right = TrackerSession(config)
        self.frame = -1


def track_frame(session: StereoTracker, left_detections, right_detections, rig=None):
    """One stereo frame: per-eye tracking and smoothing, then left/right pairing.

    Only tracks that were updated in both eyes and pair up are returned; the
    reported id and class are those of the left-eye track.
    """
    session.frame += 1
    lt = session.left.step(list(left_detections))
    rt = session.right.step(list(right_detections))
    ld = [_as_detection(tr) for tr in lt]
    rd = [_as_detection(tr) for tr in rt]
    out = []
    for i, j in epipolar_match(ld, rd, rig or session.rig):
        kp = np.concatenate([ld[i].keypoints, rd[j].keypoints], axis=1)
        vis = ld[i].visible & rd[j].visible
        obs = StereoObservation(ld[i].class_id, kp, vis, ld[i].box, rd[j].box,
                                min(ld[i].score, rd[j].score))
        out.append(TrackedObject(session.frame, lt[i].id, ld[i].class_id, obs, dict(lt[i].meta)))
    return sorted(out, key=lambda o: o.track_id)


def run_tracker(detections, config: TrackerConfig = TrackerConfig(), rig=None):
    """Track a whole sequence (list of sequence detections); returns all paired outputs."""
    from .synth import frames_of

    session = StereoTracker(config, rig)
    out = []
    frames = {dets[0].frame_index: dets for dets in frames_of(detections)}
    for f in range(max(frames) + 1 if frames else 0):
        dets = frames.get(f, [])
        left, right = [], []
        for d in dets:
            meta = {"track_gt_id": d.track_gt_id}
            for eye, dst in (("left", left), ("right", right)):
                e = d.observation.eye(eye)
                e.meta = meta
                dst.append(e)
        out.extend(track_frame(session, left, right))
    return out


def identity_mapping(tracked) -> dict:
    """``gt_id -> set of track ids`` seen for it (a stable bijection has singleton sets)."""
    mapping = {}
    for o in tracked:
        gt = o.meta.get("track_gt_id")
        if gt is not None:
            mapping.setdefault(gt, set()).add(o.track_id)
    return mapping


def write_track_csv(tracked, path):
    try:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            header = ["frame", "track_id", "class"]
            for k in range(NUM_KEYPOINTS):
                header += [f"k{k}_ul", f"k{k}_vl", f"k{k}_ur", f"k{k}_vr"]
            w.writerow(header)
            for o in tracked:
                w.writerow([o.frame, o.track_id, o.class_id]
                           + [f"{v:.9g}" for v in o.observation.keypoints.ravel()])
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc
