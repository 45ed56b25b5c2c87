"""Pose error metrics (MPVPE, ADD, ADD-S, ADD-S accuracy) and confusion matrices.

All distance metrics use the model's 512 surface samples posed with the full
articulated transform, so articulation errors are penalised.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import ClassMismatch, EmptyInput, LengthMismatch
from .geometry import apply_pose
from .instruments import model_set_digest


def _model_for(models, class_id):
    if isinstance(models, dict):
        return models[class_id]
    for m in models:
        if m.class_id == class_id:
            return m
    raise KeyError(class_id)


def vertex_errors(pred_points, gt_points) -> np.ndarray:
    """Per-point Euclidean distance between corresponding posed points."""
    return np.linalg.norm(np.asarray(pred_points) - np.asarray(gt_points), axis=-1)


def add(pose_pred, pose_gt, model, class_pred=None, class_gt=None) -> float:
    """Mean distance between corresponding surface points under the two poses."""
    if class_pred is not None and class_gt is not None and class_pred != class_gt:
        raise ClassMismatch(f"predicted class {class_pred} differs from ground truth {class_gt}")
    return float(vertex_errors(apply_pose(pose_pred, model, "surface"),
                               apply_pose(pose_gt, model, "surface")).mean())


mpvpe = add


def add_s(pose_pred, pose_gt, model, class_pred=None, class_gt=None) -> float:
    """Mean over ground-truth points of the distance to the closest predicted point."""
    if class_pred is not None and class_gt is not None and class_pred != class_gt:
        raise ClassMismatch(f"predicted class {class_pred} differs from ground truth {class_gt}")
    pred = apply_pose(pose_pred, model, "surface")
    gt = apply_pose(pose_gt, model, "surface")
    dist, _ = cKDTree(pred).query(gt)
    return float(dist.mean())


@dataclass
class MetricReport:
    name: str
    per_class: dict
    counts: dict
    aggregate: float
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"name": self.name, "aggregate": self.aggregate,
                "per_class": {str(k): v for k, v in sorted(self.per_class.items())},
                "counts": {str(k): v for k, v in sorted(self.counts.items())},
                "config": self.config}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["class_id", "count", self.name])
        for k in sorted(self.per_class):
            w.writerow([k, self.counts[k], f"{self.per_class[k]:.6f}"])
        w.writerow(["all", sum(self.counts.values()), f"{self.aggregate:.6f}"])
        return buf.getvalue()


def _report(name, values, classes, config):
    if not len(values):
        raise EmptyInput("no pose pairs given")
    values = np.asarray(values, dtype=float)
    classes = np.asarray(classes)
    per_class, counts = {}, {}
    for c in np.unique(classes):
        sel = classes == c
        per_class[int(c)] = float(values[sel].mean())
        counts[int(c)] = int(sel.sum())
    total = sum(counts.values())
    aggregate = sum(per_class[c] * counts[c] for c in per_class) / total
    return MetricReport(name, per_class, counts, float(aggregate), config)


def _unpack(pairs):
    """Pairs are ``(pred, gt, class_id)`` triples."""
    return [p[0] for p in pairs], [p[1] for p in pairs], [int(p[2]) for p in pairs]


def mpvpe_report(pairs, models) -> MetricReport:
    preds, gts, classes = _unpack(pairs)
    vals = [mpvpe(p, g, _model_for(models, c)) for p, g, c in zip(preds, gts, classes)]
    return _report("mpvpe_mm", vals, classes, {"model_set": model_set_digest(_as_list(models))})


def add_report(pairs, models) -> MetricReport:
    preds, gts, classes = _unpack(pairs)
    vals = [add(p, g, _model_for(models, c)) for p, g, c in zip(preds, gts, classes)]
    return _report("add_mm", vals, classes, {"model_set": model_set_digest(_as_list(models))})


def add_s_accuracy(pairs, models, fraction=0.10) -> MetricReport:
    """Share of pairs whose ADD-S is below ``fraction`` of the model diameter, per class."""
    preds, gts, classes = _unpack(pairs)
    hits = []
    for p, g, c in zip(preds, gts, classes):
        m = _model_for(models, c)
        hits.append(float(add_s(p, g, m) < fraction * m.diameter))
    return _report("add_s_accuracy", hits, classes,
                   {"fraction": fraction, "model_set": model_set_digest(_as_list(models))})


def _as_list(models):
    return list(models.values()) if isinstance(models, dict) else list(models)


def confusion_matrix(pred_classes, gt_classes, C) -> np.ndarray:
    """Row-normalised ``C x C`` matrix; row = ground truth, column = prediction."""
    pred = np.asarray(pred_classes, dtype=int)
    gt = np.asarray(gt_classes, dtype=int)
    if pred.shape != gt.shape:
        raise LengthMismatch(f"{pred.size} predictions for {gt.size} labels")
    M = np.zeros((C, C))
    np.add.at(M, (gt, pred), 1.0)
    rows = M.sum(1, keepdims=True)
    return np.divide(M, rows, out=np.zeros_like(M), where=rows > 0)
