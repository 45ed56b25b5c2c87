"""Checkpoint file format.

Layout::

    b"STEREOPOSE-CKPT\\n"
    <JSON header>\\n        schema_version, config, seed, epoch, hyper, arrays=[[name, shape], ...]
    <raw arrays>           float64 little-endian, C order, in header order

Saving then loading reproduces every array bit for bit.
"""
from __future__ import annotations

import json

import numpy as np

from ..errors import IoFailure, ShapeMismatch
from .config import ModelConfig
from .network import check_params

MAGIC = b"STEREOPOSE-CKPT\n"
SCHEMA_VERSION = 1


def save_checkpoint(path, params, config: ModelConfig, seed, epoch, hyper=None):
    header = {
        "schema_version": SCHEMA_VERSION,
        "config": config.to_dict(),
        "seed": seed,
        "epoch": epoch,
        "hyper": hyper,
        "arrays": [[name, list(arr.shape)] for name, arr in params.items()],
    }
    try:
        with open(path, "wb") as fh:
            fh.write(MAGIC)
            fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
            for arr in params.values():
                fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    except OSError as exc:
        raise IoFailure(f"cannot write checkpoint {path}: {exc}") from exc


def load_checkpoint(path):
    """Return ``(params, config, header)``."""
    try:
        with open(path, "rb") as fh:
            if fh.readline() != MAGIC:
                raise IoFailure(f"{path} is not a checkpoint")
            header = json.loads(fh.readline())
            blob = fh.read()
    except OSError as exc:
        raise IoFailure(f"cannot read checkpoint {path}: {exc}") from exc
    if header.get("schema_version") != SCHEMA_VERSION:
        raise IoFailure(f"unsupported checkpoint schema {header.get('schema_version')!r}")
    config = ModelConfig.from_dict(header["config"])
    params, offset = {}, 0
    for name, shape in header["arrays"]:
        n = int(np.prod(shape)) * 8
        if offset + n > len(blob):
            raise ShapeMismatch(f"checkpoint truncated at {name}")
        params[name] = np.frombuffer(blob, dtype="<f8", count=n // 8, offset=offset).reshape(shape).astype(float)
        offset += n
    check_params(params, config)
    return params, config, header
