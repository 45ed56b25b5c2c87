"""Pre-norm transformer encoder with hand-written reverse mode.

Parameters are a flat ``dict`` of float64 arrays in a fixed order (see
:func:`param_shapes`). :func:`forward` optionally keeps the activations that
:func:`backward` needs.
"""
from __future__ import annotations

import numpy as np

from ..errors import ShapeMismatch
from .config import ModelConfig

LN_EPS = 1e-5


def param_shapes(config: ModelConfig) -> dict:
    D, F = config.hidden_dim, config.feature_dim
    Hf = D * config.ffn_mult
    shapes = {"embed.W": (F, D), "embed.b": (D,)}
    for i in range(config.layers):
        p = f"layer{i}."
        shapes.update({
            p + "ln1.g": (D,), p + "ln1.b": (D,),
            p + "attn.Wq": (D, D), p + "attn.bq": (D,),
            p + "attn.Wk": (D, D), p + "attn.bk": (D,),
            p + "attn.Wv": (D, D), p + "attn.bv": (D,),
            p + "attn.Wo": (D, D), p + "attn.bo": (D,),
            p + "ln2.g": (D,), p + "ln2.b": (D,),
            p + "ffn.W1": (D, Hf), p + "ffn.b1": (Hf,),
            p + "ffn.W2": (Hf, D), p + "ffn.b2": (D,),
        })
    shapes.update({
        "final_ln.g": (D,), "final_ln.b": (D,),
        "kp_head.W": (D, 3), "kp_head.b": (3,),
        "pose_head.W": (D, config.pose_dim), "pose_head.b": (config.pose_dim,),
    })
    return shapes


def init_params(config: ModelConfig, seed: int) -> dict:
    """Xavier-uniform weights, zero biases, unit layer-norm gains."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x7F0]))
    params = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".g"):
            params[name] = np.ones(shape)
        elif len(shape) == 2:
            limit = np.sqrt(6.0 / (shape[0] + shape[1]))
            params[name] = rng.uniform(-limit, limit, size=shape)
        else:
            params[name] = np.zeros(shape)
    return params


def zeros_like_params(params) -> dict:
    return {k: np.zeros_like(v) for k, v in params.items()}


def check_params(params, config: ModelConfig):
    shapes = param_shapes(config)
    if list(params) != list(shapes):
        raise ShapeMismatch("parameter names do not match the model configuration")
    for name, shape in shapes.items():
        if params[name].shape != shape:
            raise ShapeMismatch(f"{name}: expected {shape}, got {params[name].shape}")


def _ln_forward(x, g, b):
    mu = x.mean(-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(-1, keepdims=True) + LN_EPS)
    xh = xc * inv
    return xh * g + b, (xh, inv)


def _ln_backward(dy, g, cache):
    xh, inv = cache
    dg = np.einsum("nd,nd->d", dy, xh)
    db = dy.sum(0)
    dxh = dy * g
    dx = inv * (dxh - dxh.mean(-1, keepdims=True) - xh * (dxh * xh).mean(-1, keepdims=True))
    return dx, dg, db


def forward(params, tokens, config: ModelConfig, keep=False):
    """Run the encoder on ``tokens (B, 13, F)`` (or a single ``(13, F)``).

    Returns ``(keypoints3d_mm (B, 12, 3), pose (B, pose_dim))`` where pose is
    ``[t_mm(3), rotation raw(6 or 3), articulation rad]``; with ``keep=True``
    a cache for :func:`backward` is returned as third element.
    """
    single = tokens.ndim == 2
    X = tokens[None] if single else tokens
    B, T, F = X.shape
    if F != config.feature_dim or T != config.tokens:
        raise ShapeMismatch(f"tokens have shape {X.shape[1:]}, expected "
                            f"{(config.tokens, config.feature_dim)}")
    D, H = config.hidden_dim, config.heads
    dh = D // H
    scale = 1.0 / np.sqrt(dh)
    K = config.keypoint_count

    x2 = X.reshape(B * T, F)
    h = x2 @ params["embed.W"] + params["embed.b"]
    layers = []
    for i in range(config.layers):
        p = f"layer{i}."
        a, ln1 = _ln_forward(h, params[p + "ln1.g"], params[p + "ln1.b"])
        W = np.concatenate([params[p + "attn.Wq"], params[p + "attn.Wk"], params[p + "attn.Wv"]], 1)
        bias = np.concatenate([params[p + "attn.bq"], params[p + "attn.bk"], params[p + "attn.bv"]])
        qkv = (a @ W + bias).reshape(B, T, 3, H, dh).transpose(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        s = (q @ k.transpose(0, 1, 3, 2)) * scale
        s -= s.max(-1, keepdims=True)
        att = np.exp(s)
        att /= att.sum(-1, keepdims=True)
        o = (att @ v).transpose(0, 2, 1, 3).reshape(B * T, D)
        h = h + o @ params[p + "attn.Wo"] + params[p + "attn.bo"]
        c, ln2 = _ln_forward(h, params[p + "ln2.g"], params[p + "ln2.b"])
        r = c @ params[p + "ffn.W1"]
        r += params[p + "ffn.b1"]
        np.maximum(r, 0.0, out=r)
        h = h + r @ params[p + "ffn.W2"] + params[p + "ffn.b2"]
        if keep:
            layers.append((a, ln1, q, k, v, att, o, c, ln2, r))
    z, lnf = _ln_forward(h, params["final_ln.g"], params["final_ln.b"])
    z3 = z.reshape(B, T, D)
    kp_raw = z3[:, :K] @ params["kp_head.W"] + params["kp_head.b"]
    pose_raw = z3[:, K] @ params["pose_head.W"] + params["pose_head.b"]

    s_mm = config.output_scale_mm
    kp = kp_raw * s_mm
    pose = pose_raw.copy()
    pose[:, :3] *= s_mm
    if single:
        kp, pose = kp[0], pose[0]
    if keep:
        return kp, pose, (X, layers, z3, lnf)
    return kp, pose


def backward(params, cache, d_kp, d_pose, config: ModelConfig) -> dict:
    """Gradients of a scalar w.r.t. all parameters given its gradients w.r.t. the outputs."""
    X, layers, z3, lnf = cache
    B, T, F = X.shape
    D, H = config.hidden_dim, config.heads
    dh = D // H
    scale = 1.0 / np.sqrt(dh)
    K = config.keypoint_count
    s_mm = config.output_scale_mm
    g = {}

    d_kp_raw = np.asarray(d_kp).reshape(B, K, 3) * s_mm
    d_pose_raw = np.asarray(d_pose, dtype=float).reshape(B, -1).copy()
    d_pose_raw[:, :3] *= s_mm

    g["kp_head.W"] = np.einsum("bkd,bke->de", z3[:, :K], d_kp_raw)
    g["kp_head.b"] = d_kp_raw.sum((0, 1))
    g["pose_head.W"] = z3[:, K].T @ d_pose_raw
    g["pose_head.b"] = d_pose_raw.sum(0)
    dz = np.empty((B, T, D))
    dz[:, :K] = d_kp_raw @ params["kp_head.W"].T
    dz[:, K] = d_pose_raw @ params["pose_head.W"].T
    dh_, g["final_ln.g"], g["final_ln.b"] = _ln_backward(dz.reshape(B * T, D),
                                                        params["final_ln.g"], lnf)

    for i in reversed(range(config.layers)):
        p = f"layer{i}."
        a, ln1, q, k, v, att, o, c, ln2, r = layers[i]
        # feed-forward branch
        g[p + "ffn.W2"] = r.T @ dh_
        g[p + "ffn.b2"] = dh_.sum(0)
        dr = dh_ @ params[p + "ffn.W2"].T
        dr[r <= 0] = 0.0
        g[p + "ffn.W1"] = c.T @ dr
        g[p + "ffn.b1"] = dr.sum(0)
        dc = dr @ params[p + "ffn.W1"].T
        dx, g[p + "ln2.g"], g[p + "ln2.b"] = _ln_backward(dc, params[p + "ln2.g"], ln2)
        dh_ = dh_ + dx
        # attention branch
        g[p + "attn.Wo"] = o.T @ dh_
        g[p + "attn.bo"] = dh_.sum(0)
        do = (dh_ @ params[p + "attn.Wo"].T).reshape(B, T, H, dh).transpose(0, 2, 1, 3)
        datt = do @ v.transpose(0, 1, 3, 2)
        dv = att.transpose(0, 1, 3, 2) @ do
        ds = att * (datt - (datt * att).sum(-1, keepdims=True)) * scale
        dq = ds @ k
        dk = ds.transpose(0, 1, 3, 2) @ q
        dqkv = np.stack([dq, dk, dv]).transpose(1, 3, 0, 2, 4).reshape(B * T, 3 * D)
        W = np.concatenate([params[p + "attn.Wq"], params[p + "attn.Wk"], params[p + "attn.Wv"]], 1)
        dW = a.T @ dqkv
        db = dqkv.sum(0)
        for j, name in enumerate("qkv"):
            g[p + f"attn.W{name}"] = dW[:, j * D:(j + 1) * D]
            g[p + f"attn.b{name}"] = db[j * D:(j + 1) * D]
        da = dqkv @ W.T
        dx, g[p + "ln1.g"], g[p + "ln1.b"] = _ln_backward(da, params[p + "ln1.g"], ln1)
        dh_ = dh_ + dx

    x2 = X.reshape(B * T, F)
    g["embed.W"] = x2.T @ dh_
    g["embed.b"] = dh_.sum(0)
    return {name: g[name] for name in params}
