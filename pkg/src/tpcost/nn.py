"""Minimal float64 neural-net primitives with hand-written backward passes.

Every *_fwd returns (output, cache); the matching *_bwd consumes the cache
and the upstream gradient. Shapes use the convention (..., features) with
reductions over all leading axes. Everything is pure numpy so training is
bitwise deterministic for a fixed seed.
"""

from __future__ import annotations

import math

import numpy as np


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int,
                   shape: tuple[int, ...] | None = None) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape or (fan_in, fan_out))


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------

def linear_fwd(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    return x @ w + b, x


def linear_bwd(dy: np.ndarray, x: np.ndarray, w: np.ndarray):
    x2 = x.reshape(-1, x.shape[-1])
    dy2 = dy.reshape(-1, dy.shape[-1])
    dw = x2.T @ dy2
    db = dy2.sum(axis=0)
    dx = dy @ w.T
    return dx, dw, db


def relu_fwd(x: np.ndarray):
    mask = x > 0
    return x * mask, mask


def relu_bwd(dy: np.ndarray, mask: np.ndarray) -> np.ndarray:
    return dy * mask


def layernorm_fwd(x: np.ndarray, g: np.ndarray, b: np.ndarray,
                  eps: float = 1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv
    return g * xhat + b, (xhat, inv)


def layernorm_bwd(dy: np.ndarray, cache, g: np.ndarray):
    xhat, inv = cache
    dxhat = dy * g
    mean_dxhat = dxhat.mean(axis=-1, keepdims=True)
    mean_dxhat_xhat = (dxhat * xhat).mean(axis=-1, keepdims=True)
    dx = inv * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat)
    axes = tuple(range(dy.ndim - 1))
    dg = (dy * xhat).sum(axis=axes)
    db = dy.sum(axis=axes)
    return dx, dg, db


def softmax_fwd(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_bwd(dy: np.ndarray, y: np.ndarray) -> np.ndarray:
    return y * (dy - (dy * y).sum(axis=-1, keepdims=True))


def attention_fwd(x: np.ndarray, wq, bq, wk, bk, wv, bv, wo, bo,
                  n_heads: int):
    """Multi-head self-attention over x of shape (B, L, D)."""
    bsz, length, dim = x.shape
    dh = dim // n_heads
    scale = 1.0 / math.sqrt(dh)

    def split(t):  # (B, L, D) -> (B, H, L, dh)
        return t.reshape(bsz, length, n_heads, dh).transpose(0, 2, 1, 3)

    q, k, v = split(x @ wq + bq), split(x @ wk + bk), split(x @ wv + bv)
    scores = (q @ k.transpose(0, 1, 3, 2)) * scale  # (B, H, L, L)
    attn = softmax_fwd(scores)
    ctx = attn @ v  # (B, H, L, dh)
    merged = ctx.transpose(0, 2, 1, 3).reshape(bsz, length, dim)
    out = merged @ wo + bo
    cache = (x, q, k, v, attn, merged, scale)
    return out, cache


def attention_bwd(dy: np.ndarray, cache, wq, wk, wv, wo, n_heads: int):
    x, q, k, v, attn, merged, scale = cache
    bsz, length, dim = x.shape
    dh = dim // n_heads

    dmerged, dwo, dbo = linear_bwd(dy, merged, wo)
    dctx = dmerged.reshape(bsz, length, n_heads, dh).transpose(0, 2, 1, 3)
    dattn = dctx @ v.transpose(0, 1, 3, 2)
    dv = attn.transpose(0, 1, 3, 2) @ dctx
    dscores = softmax_bwd(dattn, attn) * scale
    dq = dscores @ k
    dk = dscores.transpose(0, 1, 3, 2) @ q

    def merge(t):  # (B, H, L, dh) -> (B, L, D)
        return t.transpose(0, 2, 1, 3).reshape(bsz, length, dim)

    dxq, dwq, dbq = linear_bwd(merge(dq), x, wq)
    dxk, dwk, dbk = linear_bwd(merge(dk), x, wk)
    dxv, dwv, dbv = linear_bwd(merge(dv), x, wv)
    dx = dxq + dxk + dxv
    return dx, {"Wq": dwq, "bq": dbq, "Wk": dwk, "bk": dbk,
                "Wv": dwv, "bv": dbv, "Wo": dwo, "bo": dbo}


# ---------------------------------------------------------------------------
# Optimizers
# ---------------------------------------------------------------------------

class Adam:
    def __init__(self, param_names, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, weight_decay: float = 0.0):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {name: None for name in param_names}
        self.v = {name: None for name in param_names}

    def step(self, params: dict[str, np.ndarray],
             grads: dict[str, np.ndarray], lr: float) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, p in params.items():
            g = grads[name]
            if self.weight_decay:
                g = g + self.weight_decay * p
            if self.m[name] is None:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


class Sgd:
    def __init__(self, param_names, weight_decay: float = 0.0):
        self.weight_decay = weight_decay

    def step(self, params: dict[str, np.ndarray],
             grads: dict[str, np.ndarray], lr: float) -> None:
        for name, p in params.items():
            g = grads[name]
            if self.weight_decay:
                g = g + self.weight_decay * p
            p -= lr * g
