"""Differentiable building blocks with hand-written backward passes.

Parameters live in flat ``dict[str, ndarray]`` maps; every array is 2-D
(biases are ``(1, n)``) so checkpoints round-trip shapes without extra
metadata.  Affine weights are stored ``(out, in)`` and applied as
``x @ W.T + b``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

POOL_VAR_EPS = 1e-8
NORM_FLOOR = 1e-12


class DivergenceError(FloatingPointError):
    """Raised when training produces non-finite values."""


@dataclass
class EncoderConfig:
    in_dim: int = 24
    hidden: int = 64
    n_layers: int = 2
    emb_dim: int = 32

    def scaled(self, width_factor: int = 2) -> "EncoderConfig":
        return EncoderConfig(self.in_dim, self.hidden * width_factor, self.n_layers, self.emb_dim)


@dataclass
class HeadConfig:
    in_dim: int = 32
    hidden: int = 64
    bottleneck: int = 32
    out_dim: int = 256


def _affine_init(rng, n_out, n_in):
    w = rng.standard_normal((n_out, n_in)) * np.sqrt(2.0 / n_in)
    return w, np.zeros((1, n_out))


def init_encoder(cfg: EncoderConfig, rng: np.random.Generator, prefix: str = "enc") -> dict:
    p = {}
    d = cfg.in_dim
    for i in range(cfg.n_layers):
        p[f"{prefix}.l{i}.W"], p[f"{prefix}.l{i}.b"] = _affine_init(rng, cfg.hidden, d)
        d = cfg.hidden
    w, b = _affine_init(rng, cfg.emb_dim, 2 * d)
    p[f"{prefix}.emb.W"], p[f"{prefix}.emb.b"] = w * np.sqrt(0.5), b
    return p


def encoder_layers(p: dict, prefix: str = "enc") -> int:
    n = 0
    while f"{prefix}.l{n}.W" in p:
        n += 1
    return n


def post_pooling_names(prefix: str = "enc") -> list:
    return [f"{prefix}.emb.W", f"{prefix}.emb.b"]


def encoder_forward(p: dict, x: np.ndarray, prefix: str = "enc"):
    """Embed a batch of equal-length frame sequences.

    ``x`` is ``(N, T, D)`` or a single ``(T, D)`` matrix.  Frames go through
    affine+ReLU layers, are pooled to ``[mean, std]`` over time and mapped by
    the embedding affine.  Returns ``(emb (N, E), cache)``.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    if x.shape[1] < 1:
        raise ValueError("encoder needs at least one frame")
    n_layers = encoder_layers(p, prefix)
    first = p[f"{prefix}.l0.W"] if n_layers else p[f"{prefix}.emb.W"]
    expected = first.shape[1] if n_layers else first.shape[1] // 2
    if x.shape[2] != expected:
        raise ValueError(f"input dim {x.shape[2]} does not match encoder input {expected}")
    acts, pre = [x], []
    h = x
    for i in range(n_layers):
        a = h @ p[f"{prefix}.l{i}.W"].T + p[f"{prefix}.l{i}.b"]
        h = np.maximum(a, 0.0)
        pre.append(a)
        acts.append(h)
    mu = h.mean(axis=1)
    dev = h - mu[:, None, :]
    sd = np.sqrt((dev * dev).mean(axis=1) + POOL_VAR_EPS)
    pooled = np.concatenate([mu, sd], axis=1)
    emb = pooled @ p[f"{prefix}.emb.W"].T + p[f"{prefix}.emb.b"]
    cache = {"acts": acts, "pre": pre, "dev": dev, "sd": sd, "pooled": pooled, "prefix": prefix}
    return emb, cache


def encoder_backward(p: dict, cache: dict, grad_emb: np.ndarray, trainable=None) -> dict:
    """Gradients of ``sum(grad_emb * emb)`` w.r.t. every encoder parameter.

    When ``trainable`` is given, backpropagation stops as soon as no
    remaining layer is trainable.
    """
    prefix = cache["prefix"]
    g = np.asarray(grad_emb, dtype=np.float64)
    grads = {
        f"{prefix}.emb.W": g.T @ cache["pooled"],
        f"{prefix}.emb.b": g.sum(axis=0, keepdims=True),
    }
    n_layers = len(cache["pre"])
    if trainable is not None and not any(f"{prefix}.l{i}.W" in trainable or f"{prefix}.l{i}.b" in trainable for i in range(n_layers)):
        return grads
    gp = g @ p[f"{prefix}.emb.W"]
    h_dim = cache["sd"].shape[1]
    g_mu, g_sd = gp[:, :h_dim], gp[:, h_dim:]
    t = cache["dev"].shape[1]
    # d mean/d h_t = 1/T ; d std/d h_t = (h_t - mean) / (T * std)
    dh = (g_mu[:, None, :] + g_sd[:, None, :] * cache["dev"] / cache["sd"][:, None, :]) / t
    for i in reversed(range(n_layers)):
        da = dh * (cache["pre"][i] > 0)
        h_prev = cache["acts"][i]
        grads[f"{prefix}.l{i}.W"] = da.reshape(-1, da.shape[-1]).T @ h_prev.reshape(-1, h_prev.shape[-1])
        grads[f"{prefix}.l{i}.b"] = da.sum(axis=(0, 1))[None, :]
        if i > 0:
            dh = da @ p[f"{prefix}.l{i}.W"]
    return grads


def init_head(cfg: HeadConfig, rng: np.random.Generator, prefix: str = "head") -> dict:
    p = {}
    dims = [cfg.in_dim, cfg.hidden, cfg.hidden, cfg.bottleneck]
    for i in range(3):
        p[f"{prefix}.h{i}.W"], p[f"{prefix}.h{i}.b"] = _affine_init(rng, dims[i + 1], dims[i])
    v = rng.standard_normal((cfg.out_dim, cfg.bottleneck))
    p[f"{prefix}.last.V"] = v / np.linalg.norm(v, axis=1, keepdims=True)
    return p


def last_layer_names(prefix: str = "head") -> list:
    return [f"{prefix}.last.V"]


def head_forward(p: dict, e: np.ndarray, prefix: str = "head"):
    """Projection head: two affine+ReLU, a linear bottleneck, l2 norm, and a
    weight-normalized output layer with unit gain.  Returns ``(logits, cache)``."""
    e = np.atleast_2d(np.asarray(e, dtype=np.float64))
    acts, pre = [e], []
    h = e
    for i in range(3):
        a = h @ p[f"{prefix}.h{i}.W"].T + p[f"{prefix}.h{i}.b"]
        pre.append(a)
        h = np.maximum(a, 0.0) if i < 2 else a
        acts.append(h)
    u = h
    norm = np.maximum(np.linalg.norm(u, axis=1, keepdims=True), NORM_FLOOR)
    z = u / norm
    v = p[f"{prefix}.last.V"]
    vnorm = np.maximum(np.linalg.norm(v, axis=1, keepdims=True), NORM_FLOOR)
    vhat = v / vnorm
    logits = z @ vhat.T
    cache = {"acts": acts, "pre": pre, "z": z, "norm": norm, "vhat": vhat, "vnorm": vnorm, "prefix": prefix}
    return logits, cache


def head_backward(p: dict, cache: dict, grad_logits: np.ndarray):
    """Returns ``(param grads, grad w.r.t. the input embedding)``."""
    prefix = cache["prefix"]
    g = np.asarray(grad_logits, dtype=np.float64)
    z, vhat = cache["z"], cache["vhat"]
    g_vhat = g.T @ z
    g_v = (g_vhat - np.sum(g_vhat * vhat, axis=1, keepdims=True) * vhat) / cache["vnorm"]
    grads = {f"{prefix}.last.V": g_v}
    g_z = g @ vhat
    dh = (g_z - np.sum(g_z * z, axis=1, keepdims=True) * z) / cache["norm"]
    for i in reversed(range(3)):
        da = dh * (cache["pre"][i] > 0) if i < 2 else dh
        grads[f"{prefix}.h{i}.W"] = da.T @ cache["acts"][i]
        grads[f"{prefix}.h{i}.b"] = da.sum(axis=0, keepdims=True)
        dh = da @ p[f"{prefix}.h{i}.W"]
    return grads, dh


def normalize_rows(p: dict, names) -> None:
    for name in names:
        w = p[name]
        w /= np.maximum(np.linalg.norm(w, axis=1, keepdims=True), NORM_FLOOR)


class Adam:
    """Adam with bias correction, optional AMSGrad, and decoupled weight decay.

    State is kept per parameter name, including the step count, so a
    parameter that starts training late gets proper bias correction.
    Parameters are updated in place; names not in ``trainable`` are never
    touched.  ``unit_rows`` names are re-normalized to unit-norm rows after
    each update.
    """

    def __init__(self, lr=1e-3, betas=(0.9, 0.95), eps=1e-8, weight_decay=0.0, amsgrad=True, unit_rows=()):
        self.lr = lr
        self.betas = tuple(betas)
        self.eps = eps
        self.weight_decay = weight_decay
        self.amsgrad = amsgrad
        self.unit_rows = set(unit_rows)
        self.m, self.v, self.vmax, self.t = {}, {}, {}, {}

    def step(self, params: dict, grads: dict, lr=None, trainable=None) -> dict:
        lr = self.lr if lr is None else lr
        names = [n for n in params if (trainable is None or n in trainable) and n in grads]
        for n in names:
            if not np.all(np.isfinite(grads[n])):
                raise DivergenceError(f"diverged: non-finite gradient for {n}")
        b1, b2 = self.betas
        for n in names:
            g = grads[n]
            if n not in self.m:
                self.m[n] = np.zeros_like(g)
                self.v[n] = np.zeros_like(g)
                self.vmax[n] = np.zeros_like(g)
                self.t[n] = 0
            self.t[n] += 1
            t = self.t[n]
            m = self.m[n]
            v = self.v[n]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            if self.amsgrad:
                np.maximum(self.vmax[n], v, out=self.vmax[n])
                v_hat = self.vmax[n] / (1 - b2**t)
            else:
                v_hat = v / (1 - b2**t)
            m_hat = m / (1 - b1**t)
            p = params[n]
            if self.weight_decay:
                p -= lr * self.weight_decay * p
            p -= lr * m_hat / (np.sqrt(v_hat) + self.eps)
            if n in self.unit_rows:
                normalize_rows(params, [n])
        return params


def adam_step(params: dict, grads: dict, st: Adam, lr=None, trainable=None) -> dict:
    return st.step(params, grads, lr=lr, trainable=trainable)


def relative_error(a, n):
    a, n = np.asarray(a, dtype=np.float64), np.asarray(n, dtype=np.float64)
    return np.abs(a - n) / np.maximum(1e-8, np.abs(a) + np.abs(n))


def grad_check(params: dict, loss_fn, grads: dict, h: float = 1e-5, names=None, max_per_param=None, rng=None) -> float:
    """Max relative error between ``grads`` and central differences of ``loss_fn``.

    ``loss_fn()`` must read the current contents of ``params`` (entries are
    perturbed in place and restored).  ``max_per_param`` subsamples entries.
    """
    worst = 0.0
    for name in names or list(grads):
        w = params[name]
        flat = w.reshape(-1)
        idx = np.arange(flat.size)
        if max_per_param is not None and flat.size > max_per_param:
            idx = (rng or np.random.default_rng(0)).choice(flat.size, max_per_param, replace=False)
        ga = grads[name].reshape(-1)
        for i in idx:
            old = flat[i]
            flat[i] = old + h
            lp = loss_fn()
            flat[i] = old - h
            lm = loss_fn()
            flat[i] = old
            num = (lp - lm) / (2 * h)
            worst = max(worst, float(relative_error(ga[i], num)))
    return worst


def grad_check_directional(params: dict, loss_fn, grads: dict, n_dirs: int = 8, h: float = 1e-5, rng=None) -> float:
    """Max relative error between ``g . v`` and the central difference along ``v``.

    ``v`` are random unit directions over all entries of ``grads`` jointly.
    Unlike the per-entry check this stays well-conditioned when some gradient
    entries are far below the round-off noise of the difference quotient.
    """
    rng = rng or np.random.default_rng(0)
    names = list(grads)
    worst = 0.0
    for _ in range(n_dirs):
        v = {n: rng.standard_normal(params[n].shape) for n in names}
        scale = np.sqrt(sum(float(np.sum(d * d)) for d in v.values()))
        v = {n: d / scale for n, d in v.items()}
        saved = {n: params[n].copy() for n in names}
        for n in names:
            params[n] += h * v[n]
        lp = loss_fn()
        for n in names:
            params[n][...] = saved[n] - h * v[n]
        lm = loss_fn()
        for n in names:
            params[n][...] = saved[n]
        analytic = sum(float(np.sum(grads[n] * v[n])) for n in names)
        worst = max(worst, float(relative_error(analytic, (lp - lm) / (2 * h))))
    return worst
