"""Finite-difference checks of the two hand-written gradients."""
import numpy as np

from stereopose.fitter import _Problem
from stereopose.instruments import ModelStack
from stereopose.synth import NoiseConfig, PoseSampler, generate_records, make_record
from stereopose.transformer import ModelConfig, init_params, loss_and_grad, make_targets
from stereopose.transformer import tokenize_records


def _rel(a, f, floor):
    return abs(a - f) / max(abs(a), abs(f), floor)


def network_gradient_errors(seed, models, rig, n_entries=3, h=1e-6):
    """Worst relative error per parameter tensor for one random configuration.

    Each tensor is checked along one random direction and at ``n_entries``
    random entries. Tensors whose true gradient vanishes identically (the key
    bias, by softmax shift invariance) are compared against an absolute floor
    of ``1e-5 * (1 + |L|)``; the round-off of a central difference with
    ``h = 1e-6`` is about ``2e-10 * |L|``, so the floor only absorbs noise.
    """
    rng = np.random.default_rng(seed)
    config = ModelConfig(layers=int(rng.integers(1, 3)), hidden_dim=8 * int(rng.integers(1, 3)),
                         heads=2, modality=("mono", "stereo")[seed % 2],
                         keypoint_onehot=bool(rng.integers(2)),
                         rotation_mode=("axis_angle3", "sixd")[(seed // 2) % 2])
    records = generate_records(models, rig, PoseSampler(seed=100 + seed), 6, NoiseConfig())
    stack = ModelStack(models)
    tokens = tokenize_records(records, config, rig)
    targets = make_targets(records, stack, config)
    params = init_params(config, seed)
    # non-trivial layer norm and bias values
    for k, v in params.items():
        if v.ndim == 1:
            params[k] = v + 0.1 * rng.normal(size=v.shape)

    def f(p):
        return loss_and_grad(p, tokens, targets, stack, config)[0]

    L, _, grads = loss_and_grad(params, tokens, targets, stack, config)
    floor = 1e-5 * (1.0 + abs(L))
    worst = {}
    for name, g in grads.items():
        errs = []
        u = rng.normal(size=g.shape)
        entries = [("dir", u)]
        for _ in range(n_entries):
            e = np.zeros(g.shape)
            e[tuple(rng.integers(s) for s in g.shape)] = 1.0
            entries.append(("entry", e))
        for _, d in entries:
            p_plus = dict(params)
            p_minus = dict(params)
            p_plus[name] = params[name] + h * d
            p_minus[name] = params[name] - h * d
            fd = (f(p_plus) - f(p_minus)) / (2 * h)
            errs.append(_rel(float(np.sum(g * d)), fd, floor))
        worst[name] = max(errs)
    return config, worst


def fitter_gradient_errors(seed, models, rig, h=1e-6):
    """Relative error of all 10 pose-gradient entries at a perturbed pose."""
    rng = np.random.default_rng(seed)
    rec = make_record(models, rig, PoseSampler(seed=200 + seed), NoiseConfig(score_range=(1, 1)),
                      seed)
    model = next(m for m in models if m.class_id == rec.observation.class_id)
    problem = _Problem(rec.observation, model, rig)
    x = rec.pose.as_vector() + rng.normal(0, [8, 8, 8, .2, .2, .2, .2, .2, .2, .1])
    x[9] = np.clip(x[9], 0.05, 1.5)
    L, _, g = problem.loss_grad(x[None])
    errs = []
    for k in range(10):
        step = h * max(1.0, abs(x[k]))
        xp, xm = x.copy(), x.copy()
        xp[k] += step
        xm[k] -= step
        fd = (problem.loss_grad(xp[None])[0][0] - problem.loss_grad(xm[None])[0][0]) / (2 * step)
        errs.append(_rel(g[0, k], fd, 1e-7 * (1.0 + L[0])))
    return np.array(errs)
