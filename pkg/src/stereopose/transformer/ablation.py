"""Modality ablation: train each ladder configuration on one dataset and rank by MPVPE."""
from __future__ import annotations

import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .config import ABLATION_CONFIGS, ModelConfig
from .train import TrainHyper, evaluate_mpvpe, train

log = logging.getLogger(__name__)


@dataclass
class AblationRow:
    name: str
    mpvpe_mm: float
    train_seconds: float
    final_loss: float


def split_indices(n, holdout=0.1, seed=0):
    """Deterministic train / held-out split of ``n`` record indices."""
    order = np.random.default_rng(np.random.SeedSequence([seed, 0xAB1])).permutation(n)
    k = max(1, int(round(n * holdout)))
    return np.sort(order[k:]), np.sort(order[:k])


def _run_one(args):
    name, config, train_recs, test_recs, models, rig, hyper = args
    t0 = time.perf_counter()
    result = train(train_recs, config, models, hyper, rig=rig)
    seconds = time.perf_counter() - t0
    report, _ = evaluate_mpvpe(result.params, config, test_recs, models, rig)
    row = AblationRow(name, report.aggregate, seconds, result.epoch_loss[-1])
    log.info("ablation %s: MPVPE %.2f mm after %.0f s", name, row.mpvpe_mm, seconds)
    return row


def run_ablation(records, models, rig, hyper: TrainHyper, base: ModelConfig = ModelConfig(),
                 holdout=0.1, workers=1, names=None) -> list[AblationRow]:
    """Train the ladder configurations and return rows in ladder order.

    Each configuration shares the split, the initialisation seed and the
    shuffle order; with ``workers > 1`` configurations train in separate
    processes, which does not change any result.
    """
    tr, te = split_indices(len(records), holdout, hyper.seed)
    train_recs = [records[i] for i in tr]
    test_recs = [records[i] for i in te]
    names = list(ABLATION_CONFIGS) if names is None else list(names)
    jobs = [(n, replace(base, **ABLATION_CONFIGS[n]), train_recs, test_recs, models, rig, hyper)
            for n in names]
    if workers > 1:
        with ProcessPoolExecutor(min(workers, len(jobs))) as pool:
            return list(pool.map(_run_one, jobs))
    return [_run_one(j) for j in jobs]


def is_strictly_decreasing(rows) -> bool:
    vals = [r.mpvpe_mm for r in rows]
    return all(a > b for a, b in zip(vals, vals[1:]))
