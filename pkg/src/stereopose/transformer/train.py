"""Adam training loop, batched inference and MPVPE evaluation."""
from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from ..errors import NonFiniteLoss
from ..geometry import THETA_MAX, CameraRig, Pose7D, matrix_to_rot6d, transform_points_batch
from ..instruments import ModelStack
from ..metrics import _report, vertex_errors
from ..synth import read_dataset
from .checkpoint import save_checkpoint
from .config import ModelConfig
from .loss import Targets, decode_rotation, loss_and_grad, pose_target
from .network import forward, init_params
from .tokens import tokenize_records

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainHyper:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch: int = 256
    epochs: int = 30
    seed: int = 0
    # "cosine" decays the step size from lr to 0 over the run; "constant" keeps lr
    schedule: str = "cosine"

    def __post_init__(self):
        if self.schedule not in ("cosine", "constant"):
            raise ValueError("schedule must be 'cosine' or 'constant'")

    def lr_at(self, step, total_steps):
        if self.schedule == "constant":
            return self.lr
        return 0.5 * self.lr * (1.0 + np.cos(np.pi * step / total_steps))


@dataclass
class TrainResult:
    params: dict
    config: ModelConfig
    hyper: TrainHyper
    log: list = field(default_factory=list)
    epoch_loss: list = field(default_factory=list)


class Adam:
    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1.0 - b1**self.t, 1.0 - b2**self.t
        for k in params:
            g = grads[k]
            self.m[k] *= b1
            self.m[k] += (1.0 - b1) * g
            self.v[k] *= b2
            self.v[k] += (1.0 - b2) * g * g
            params[k] -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


class TrainingSet:
    """Tokens and supervision arrays for a list of records."""

    def __init__(self, records, config: ModelConfig, rig: CameraRig, stack: ModelStack):
        self.config, self.stack = config, stack
        self.tokens = tokenize_records(records, config, rig)
        self.pose = np.stack([pose_target(r.pose, config) for r in records])
        self.R = np.stack([r.pose.rotation for r in records])
        self.t = np.stack([r.pose.translation for r in records])
        self.theta = np.array([r.pose.articulation for r in records])
        self.kp3d = np.stack([np.asarray(r.keypoints3d, dtype=float) for r in records])
        self.rows = stack.rows([r.class_id for r in records])
        self.class_ids = np.array([r.class_id for r in records])

    def __len__(self):
        return len(self.rows)

    def batch(self, idx):
        s, rows = self.stack, self.rows[idx]
        surf, _ = transform_points_batch(s.surface[rows], s.surface_is_b[rows], s.hinge_point[rows],
                                         s.hinge_axis[rows], self.R[idx], self.t[idx],
                                         self.theta[idx])
        return self.tokens[idx], Targets(self.pose[idx], surf, self.kp3d[idx], rows)


def _load(dataset):
    if isinstance(dataset, (list, tuple)):
        return None, list(dataset)
    header, records = read_dataset(dataset)
    return header, records


def train(dataset, config: ModelConfig, models, hyper: TrainHyper = TrainHyper(), rig=None,
          log_path=None, checkpoint_path=None, progress=None) -> TrainResult:
    """Train from a dataset file (or a list of records) with seeded init and shuffling."""
    if hyper.epochs < 1:
        raise ValueError("epochs must be at least 1")
    header, records = _load(dataset)
    if rig is None:
        rig = CameraRig.from_dict(header["rig"]) if header else CameraRig()
    stack = ModelStack(models)
    data = TrainingSet(records, config, rig, stack)
    params = init_params(config, hyper.seed)
    opt = Adam(params, hyper.lr, hyper.beta1, hyper.beta2, hyper.eps)
    result = TrainResult(params, config, hyper)
    n = len(data)
    total_steps = hyper.epochs * -(-n // hyper.batch)
    step = 0
    for epoch in range(1, hyper.epochs + 1):
        order = np.random.default_rng(np.random.SeedSequence([hyper.seed, epoch])).permutation(n)
        total, count = 0.0, 0
        for lo in range(0, n, hyper.batch):
            idx = order[lo:lo + hyper.batch]
            tokens, targets = data.batch(idx)
            loss, terms, grads = loss_and_grad(params, tokens, targets, stack, config)
            if not np.isfinite(loss):
                raise NonFiniteLoss(epoch, step, loss)
            opt.lr = hyper.lr_at(step, total_steps)
            opt.step(params, grads)
            step += 1
            total += loss * len(idx)
            count += len(idx)
            result.log.append((epoch, step, loss, terms["pose"], terms["vertex"], terms["kp3d"]))
        result.epoch_loss.append(total / count)
        log.info("epoch %d mean loss %.4f", epoch, total / count)
        if progress is not None:
            progress(epoch, total / count)
    if log_path is not None:
        write_loss_log(result.log, log_path)
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, params, config, hyper.seed, hyper.epochs, asdict(hyper))
    return result


def write_loss_log(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "step", "loss", "pose_term", "vertex_term", "kp3d_term"])
        for epoch, step, loss, p, v, k in rows:
            w.writerow([epoch, step, f"{loss:.9g}", f"{p:.9g}", f"{v:.9g}", f"{k:.9g}"])


def predict(params, config: ModelConfig, tokens, batch=1024):
    """Batched forward pass; returns ``(keypoints3d (N, 12, 3), pose vectors (N, P))``."""
    kps, poses = [], []
    for lo in range(0, len(tokens), batch):
        kp, pose = forward(params, tokens[lo:lo + batch], config)
        kps.append(kp)
        poses.append(pose)
    return np.concatenate(kps), np.concatenate(poses)


def nearest_rotation(M):
    """Closest proper rotation to each ``(..., 3, 3)`` matrix (polar factor via SVD).

    The training-time Gram-Schmidt keeps a small epsilon for stable gradients,
    which leaves tiny 6D outputs slightly off SO(3); this removes that residue.
    """
    U, _, Vt = np.linalg.svd(M)
    d = np.sign(np.linalg.det(U @ Vt))
    U = U.copy()
    U[..., :, 2] *= d[..., None]
    return U @ Vt


def decode_poses(pose_vectors, config: ModelConfig) -> list[Pose7D]:
    """Network pose vectors to valid :class:`Pose7D` (articulation clipped to its range)."""
    R = nearest_rotation(decode_rotation(pose_vectors, config))
    return [Pose7D(v[:3], matrix_to_rot6d(r), float(np.clip(v[-1], 0.0, THETA_MAX)))
            for v, r in zip(pose_vectors, R)]


def evaluate_mpvpe(params, config: ModelConfig, dataset, models, rig=None):
    """MPVPE over a dataset: returns ``(MetricReport, per-record errors)``."""
    header, records = _load(dataset)
    if rig is None:
        rig = CameraRig.from_dict(header["rig"]) if header else CameraRig()
    stack = ModelStack(models)
    data = TrainingSet(records, config, rig, stack)
    _, pose_vec = predict(params, config, data.tokens)
    poses = decode_poses(pose_vec, config)
    R = np.stack([p.rotation for p in poses])
    t = np.stack([p.translation for p in poses])
    theta = np.array([p.articulation for p in poses])
    errors = np.empty(len(records))
    s, rows = stack, data.rows
    for lo in range(0, len(records), 512):
        sl = slice(lo, lo + 512)
        args = (s.surface[rows[sl]], s.surface_is_b[rows[sl]], s.hinge_point[rows[sl]],
                s.hinge_axis[rows[sl]])
        pred, _ = transform_points_batch(*args, R[sl], t[sl], theta[sl])
        gt, _ = transform_points_batch(*args, data.R[sl], data.t[sl], data.theta[sl])
        errors[sl] = vertex_errors(pred, gt).mean(axis=1)
    report = _report("mpvpe_mm", errors, data.class_ids, {"config": config.to_dict()})
    return report, errors
