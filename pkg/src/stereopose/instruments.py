"""Procedural two-part articulated instruments (scissor and forceps families).

Each model lives in a canonical frame with the hinge at the origin and the
hinge axis along +z. The blades point along +x, the handles along -x, and
part B is the second blade/handle pair that rotates about the hinge.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import EmptyModel, IoFailure

SCHEMA_VERSION = 1
SURFACE_POINTS = 512
KEYPOINTS_PER_PART = 6
_POINTS_PER_PART = SURFACE_POINTS // 2

FAMILIES = ("scissors", "curved_scissors", "forceps", "clamp", "needle_holder")


@dataclass(frozen=True, eq=False)
class InstrumentModel:
    class_id: int
    name: str
    part_a: np.ndarray        # (n_a, 3) mm
    part_b: np.ndarray        # (n_b, 3) mm
    hinge_point: np.ndarray   # (3,)
    hinge_axis: np.ndarray    # (3,) unit
    keypoints: np.ndarray     # (12, 3)
    keypoint_is_b: np.ndarray  # (12,) bool
    diameter: float

    @property
    def surface(self) -> np.ndarray:
        return np.concatenate([self.part_a, self.part_b])

    @property
    def surface_is_b(self) -> np.ndarray:
        return np.concatenate([np.zeros(len(self.part_a), bool), np.ones(len(self.part_b), bool)])

    def to_dict(self) -> dict:
        return {
            "class_id": self.class_id,
            "name": self.name,
            "hinge_point": self.hinge_point.tolist(),
            "hinge_axis": self.hinge_axis.tolist(),
            "diameter": self.diameter,
            "keypoint_parts": ["B" if b else "A" for b in self.keypoint_is_b],
            "keypoints": self.keypoints.tolist(),
            "part_a": self.part_a.tolist(),
            "part_b": self.part_b.tolist(),
        }

    @classmethod
    def from_dict(cls, d) -> InstrumentModel:
        return cls(
            class_id=int(d["class_id"]),
            name=str(d["name"]),
            part_a=np.asarray(d["part_a"], dtype=float).reshape(-1, 3),
            part_b=np.asarray(d["part_b"], dtype=float).reshape(-1, 3),
            hinge_point=np.asarray(d["hinge_point"], dtype=float),
            hinge_axis=np.asarray(d["hinge_axis"], dtype=float),
            keypoints=np.asarray(d["keypoints"], dtype=float).reshape(-1, 3),
            keypoint_is_b=np.array([p == "B" for p in d["keypoint_parts"]]),
            diameter=float(d["diameter"]),
        )


class ModelStack:
    """Per-class model arrays stacked for batched posing, indexed by class id."""

    def __init__(self, models):
        models = sorted(models, key=lambda m: m.class_id)
        self.models = models
        self._row = {m.class_id: i for i, m in enumerate(models)}
        self.surface = np.stack([m.surface for m in models])
        self.surface_is_b = np.stack([m.surface_is_b for m in models])
        self.keypoints = np.stack([m.keypoints for m in models])
        self.keypoint_is_b = np.stack([m.keypoint_is_b for m in models])
        self.hinge_point = np.stack([m.hinge_point for m in models])
        self.hinge_axis = np.stack([m.hinge_axis for m in models])
        self.diameter = np.array([m.diameter for m in models])

    def rows(self, class_ids):
        return np.array([self._row[int(c)] for c in np.atleast_1d(class_ids)])


def diameter(model_or_points) -> float:
    """Largest pairwise distance between surface points (articulation zero)."""
    pts = getattr(model_or_points, "surface", model_or_points)
    pts = np.asarray(pts, dtype=float).reshape(-1, 3)
    if len(pts) == 0:
        raise EmptyModel("model has no surface points")
    if len(pts) == 1:
        return 0.0
    best = 0.0
    # row blocks bound the temporary to O(n * block)
    for i in range(0, len(pts), 256):
        d2 = np.sum((pts[i:i + 256, None, :] - pts[None, :, :]) ** 2, axis=-1)
        best = max(best, float(d2.max()))
    return float(np.sqrt(best))


def _blade_curve(s, length, width, curve, side):
    """Centerline and half-width of one blade+handle, parameterised by s in [-1, 1]."""
    # s > 0: blade toward the tip; s < 0: handle toward the finger ring
    x = np.where(s >= 0, s * length * 0.55, s * length * 0.45)
    bend = np.where(s >= 0, curve * length * s**2, 0.0)
    spread = np.where(s >= 0, 0.0, -side * 0.12 * length * s**2)
    y = bend + spread
    half_w = np.where(s >= 0, width * (1.0 - 0.85 * s), width * 0.6)
    return np.stack([x, y], axis=-1), half_w


def _make_part(rng, length, width, thickness, curve, side, z_layer, n):
    s = np.linspace(-1.0, 1.0, n // 2)
    center, half_w = _blade_curve(s, length, width, curve, side)
    pts = []
    for edge in (-1.0, 1.0):
        xy = center + np.stack([np.zeros_like(s), edge * half_w], axis=-1)
        z = np.full(len(s), z_layer + edge * 0.5 * thickness)
        pts.append(np.column_stack([xy, z]))
    pts = np.concatenate(pts)
    # stagger edges so no two samples coincide
    pts[len(s):, 0] += rng.uniform(0.05, 0.15)
    return pts, s, center, half_w


def _keypoint_indices(s):
    """Indices on the upper edge at tip, mid-blade, hinge side (blade and handle), mid-handle, ring end."""
    targets = (1.0, 0.5, 0.08, -0.08, -0.5, -1.0)
    return [int(np.argmin(np.abs(s - t))) for t in targets]


def make_instrument(class_id, name, length, width, thickness, curve, rng) -> InstrumentModel:
    parts, kps = [], []
    for side, z_layer in ((1.0, 0.5 * thickness), (-1.0, -0.5 * thickness)):
        pts, s, _, _ = _make_part(rng, length, width, thickness, curve, side, z_layer,
                                  _POINTS_PER_PART)
        idx = _keypoint_indices(s)
        # one blade edge per part keeps the keypoints off the hinge axis
        offset = 0 if side > 0 else len(s)
        kps.append(pts[[offset + i for i in idx]])
        parts.append(pts)
    part_a, part_b = parts
    keypoints = np.concatenate(kps)
    keypoint_is_b = np.repeat([False, True], KEYPOINTS_PER_PART)
    surface = np.concatenate([part_a, part_b])
    return InstrumentModel(
        class_id=class_id, name=name, part_a=part_a, part_b=part_b,
        hinge_point=np.zeros(3), hinge_axis=np.array([0.0, 0.0, 1.0]),
        keypoints=keypoints, keypoint_is_b=keypoint_is_b, diameter=diameter(surface),
    )


def make_instrument_set(seed, count=13) -> list[InstrumentModel]:
    """Deterministic set of ``count`` instruments, 100-250 mm long.

    Every fourth class from index 3 on is a rescaled copy (±10%) of an earlier
    class, so the set contains pairs that differ only in size.
    """
    if not 1 <= count <= 32:
        raise ValueError("count must be in [1, 32]")
    rng = np.random.default_rng(seed)
    specs = []
    for cid in range(count):
        if cid >= 3 and cid % 4 == 3:
            base = specs[cid - 3]
            scale = 1.1 if rng.uniform() < 0.5 else 0.9
            length = float(np.clip(base["length"] * scale, 100.0, 250.0))
            spec = dict(base, length=length, width=base["width"] * scale,
                        name=f"{base['name'].rsplit('_', 1)[0]}_{cid}")
        else:
            family = FAMILIES[cid % len(FAMILIES)]
            spec = {
                "name": f"{family}_{cid}",
                "length": float(rng.uniform(110.0, 240.0)),
                "width": float(rng.uniform(3.0, 8.0)),
                "thickness": float(rng.uniform(2.0, 5.0)),
                "curve": float(rng.uniform(-0.08, 0.12)),
            }
        specs.append(spec)
    return [make_instrument(cid, s["name"], s["length"], s["width"], s["thickness"],
                            s["curve"], np.random.default_rng([seed, cid]))
            for cid, s in enumerate(specs)]


def model_set_digest(models) -> str:
    h = hashlib.sha256()
    for m in models:
        h.update(json.dumps(m.to_dict(), sort_keys=True).encode())
    return h.hexdigest()


def save_model_set(models, path, seed=None):
    """Write the model set as one JSON document.

    Layout: ``{"schema_version", "seed", "models": [...]}``; each model holds
    ``class_id, name, hinge_point, hinge_axis, diameter, keypoint_parts,
    keypoints, part_a, part_b`` in that order. Floats use shortest round-trip
    repr so reloading is bit-exact.
    """
    doc = {"schema_version": SCHEMA_VERSION, "seed": seed,
           "models": [m.to_dict() for m in models]}
    try:
        Path(path).write_text(json.dumps(doc))
    except OSError as exc:
        raise IoFailure(f"cannot write model set to {path}: {exc}") from exc


def load_model_set(path) -> list[InstrumentModel]:
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as exc:
        raise IoFailure(f"cannot read model set {path}: {exc}") from exc
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise IoFailure(f"unsupported model set schema {doc.get('schema_version')!r}")
    return [InstrumentModel.from_dict(d) for d in doc["models"]]
