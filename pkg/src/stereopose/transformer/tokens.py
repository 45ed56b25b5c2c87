"""Stereo keypoints to transformer tokens.

Per object there are 13 tokens: one per keypoint and a trailing pose query
token. Keypoint token layout::

    [uL/W, vL/H, uR/W, vR/H, visible, onehot(12 keypoint index)?, onehot(C class), 0]

The pose token is zero except for the class one-hot and its final flag.
"""
from __future__ import annotations

import numpy as np

from ..errors import ClassOutOfRange
from .config import ModelConfig


def tokenize_arrays(keypoints, visible, class_ids, config: ModelConfig, width, height):
    """Vectorised tokenizer over a batch: ``keypoints (B, 12, 4)``, ``visible (B, 12)``."""
    keypoints = np.asarray(keypoints, dtype=float)
    visible = np.asarray(visible, dtype=bool)
    class_ids = np.asarray(class_ids, dtype=int)
    B, K = visible.shape
    C = config.class_count
    if np.any((class_ids < 0) | (class_ids >= C)):
        raise ClassOutOfRange(f"class ids must lie in [0, {C})")
    X = np.zeros((B, K + 1, config.feature_dim))
    coords = keypoints / np.array([width, height, width, height], dtype=float)
    if config.modality == "mono":
        coords[..., 2:] = 0.0
    X[:, :K, :4] = np.where(visible[..., None], coords, 0.0)
    X[:, :K, 4] = visible
    col = 5
    if config.keypoint_onehot:
        X[:, :K, col:col + K] = np.eye(K)
        col += K
    X[np.arange(B)[:, None], np.arange(K + 1)[None, :], col + class_ids[:, None]] = 1.0
    X[:, K, -1] = 1.0
    return X


def tokenize(obs, config: ModelConfig, rig):
    """Tokens ``(13, F)`` for a single :class:`~stereopose.geometry.StereoObservation`."""
    return tokenize_arrays(obs.keypoints[None], obs.visible[None], [obs.class_id], config,
                           rig.image_width, rig.image_height)[0]


def tokenize_records(records, config: ModelConfig, rig):
    kp = np.stack([r.observation.keypoints for r in records])
    vis = np.stack([r.observation.visible for r in records])
    cls = np.array([r.observation.class_id for r in records])
    return tokenize_arrays(kp, vis, cls, config, rig.image_width, rig.image_height)
