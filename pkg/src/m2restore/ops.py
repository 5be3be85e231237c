"""Differentiable primitives built on :mod:`m2restore.tensor`.

Feature maps are channels-first ``(B, C, H, W)``. Convolutions are
cross-correlations; ``padding="same"`` pads with zeros.
"""

from __future__ import annotations

import math
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, ContractError, DegenerateAxisError, ShapeError
from .tensor import Tensor, as_tensor, concat, make_op

GELU_COEF = math.sqrt(2.0 / math.pi)
GELU_CUBIC = 0.044715


def linear(x: Tensor, W: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """``x @ W + b`` over the last axis of ``x``."""
    if W.ndim != 2 or x.shape[-1] != W.shape[0]:
        raise ShapeError(f"linear: x has shape {x.shape} but W has shape {W.shape}")
    if b is not None and b.shape != (W.shape[1],):
        raise ShapeError(f"linear: bias shape {b.shape} does not match W shape {W.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, W.shape[0])
    out = x2 @ W.data
    if b is not None:
        out = out + b.data
    parents = (x, W) if b is None else (x, W, b)

    def bw(g):
        g2 = g.reshape(-1, W.shape[1])
        gx = (g2 @ W.data.T).reshape(x.shape) if x.requires_grad else None
        gW = x2.T @ g2 if W.requires_grad else None
        if b is None:
            return gx, gW
        return gx, gW, g2.sum(axis=0)

    return make_op(out.reshape(lead + (W.shape[1],)), parents, bw)


def conv2d(x: Tensor, k: Tensor, bias: Optional[Tensor] = None, groups: int = 1,
           padding: str = "same", stride: int = 1) -> Tensor:
    """2-D cross-correlation of ``x (B,C,H,W)`` with ``k (C_out, C/groups, kh, kw)``."""
    if x.ndim != 4 or k.ndim != 4:
        raise ShapeError(f"conv2d expects rank-4 input and kernel, got {x.shape} and {k.shape}")
    B, C, H, W = x.shape
    O, Cg, kh, kw = k.shape
    if groups < 1 or C % groups or O % groups:
        raise ConfigError(f"conv2d: groups={groups} must divide in/out channels ({C}, {O})")
    if Cg * groups != C:
        raise ShapeError(f"conv2d: kernel {k.shape} with groups={groups} does not fit input {x.shape}")
    if padding == "same":
        if kh % 2 == 0 or kw % 2 == 0:
            raise ContractError(f"same padding needs odd kernel extents, got {kh}x{kw}")
        ph, pw = kh // 2, kw // 2
    elif padding == "valid":
        ph = pw = 0
    else:
        raise ConfigError(f"unknown padding mode {padding!r}")
    Ho = (H + 2 * ph - kh) // stride + 1
    Wo = (W + 2 * pw - kw) // stride + 1
    if Ho < 1 or Wo < 1:
        raise ShapeError(f"conv2d: input {x.shape} too small for kernel {k.shape}")

    if groups == 1:
        if kh == kw == 1 and stride == 1:
            out = _pointwise(x, k)
        else:
            out = _dense_conv(x, k, ph, pw, stride, Ho, Wo)
    elif Cg == 1 and O == C:
        out = _depthwise_conv(x, k, ph, pw, stride, Ho, Wo)
    else:
        og = O // groups
        pieces = [conv2d(x[:, g * Cg:(g + 1) * Cg], k[g * og:(g + 1) * og], padding=padding, stride=stride)
                  for g in range(groups)]
        out = concat(pieces, axis=1)
    if bias is not None:
        out = out + bias.reshape(1, O, 1, 1)
    return out


def _pointwise(x: Tensor, k: Tensor) -> Tensor:
    B, C, H, W = x.shape
    O = k.shape[0]
    k2 = k.data.reshape(O, C)
    xf = x.data.reshape(B, C, H * W)
    out = np.matmul(k2, xf)

    def bw(g):
        gf = g.reshape(B, O, H * W)
        gx = np.matmul(k2.T, gf).reshape(x.shape) if x.requires_grad else None
        gk = np.tensordot(gf, xf, axes=([0, 2], [0, 2])).reshape(k.shape) if k.requires_grad else None
        return gx, gk

    return make_op(out.reshape(B, O, H, W), (x, k), bw)


def _pad(a: np.ndarray, ph: int, pw: int) -> np.ndarray:
    if ph == 0 and pw == 0:
        return a
    return np.pad(a, ((0, 0), (0, 0), (ph, ph), (pw, pw)))


def _dense_conv(x: Tensor, k: Tensor, ph, pw, stride, Ho, Wo) -> Tensor:
    B, C, H, W = x.shape
    O, _, kh, kw = k.shape
    xp = _pad(x.data, ph, pw)
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :Ho, :Wo]
    cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(B, C * kh * kw, Ho * Wo)
    k2 = k.data.reshape(O, C * kh * kw)
    out = np.matmul(k2, cols)

    def bw(g):
        gf = g.reshape(B, O, Ho * Wo)
        gk = np.tensordot(gf, cols, axes=([0, 2], [0, 2])).reshape(k.shape) if k.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = np.matmul(k2.T, gf).reshape(B, C, kh, kw, Ho, Wo)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += gcols[:, :, i, j]
            gx = gxp[:, :, ph:ph + H, pw:pw + W]
        return gx, gk

    return make_op(out.reshape(B, O, Ho, Wo), (x, k), bw)


def _depthwise_conv(x: Tensor, k: Tensor, ph, pw, stride, Ho, Wo) -> Tensor:
    B, C, H, W = x.shape
    _, _, kh, kw = k.shape
    xp = _pad(x.data, ph, pw)
    kd = k.data[:, 0]
    out = np.zeros((B, C, Ho, Wo), dtype=np.result_type(x.dtype, k.dtype))
    for i in range(kh):
        for j in range(kw):
            out += xp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] * kd[:, i, j][None, :, None, None]

    def bw(g):
        gk = np.zeros_like(k.data) if k.requires_grad else None
        gxp = np.zeros_like(xp) if x.requires_grad else None
        for i in range(kh):
            for j in range(kw):
                sl = (slice(None), slice(None), slice(i, i + stride * Ho, stride), slice(j, j + stride * Wo, stride))
                if gk is not None:
                    gk[:, 0, i, j] = (g * xp[sl]).sum(axis=(0, 2, 3))
                if gxp is not None:
                    gxp[sl] += g * kd[:, i, j][None, :, None, None]
        gx = gxp[:, :, ph:ph + H, pw:pw + W] if gxp is not None else None
        return gx, gk

    return make_op(out, (x, k), bw)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5, axis: int = -1) -> Tensor:
    """Normalise ``x`` to zero mean / unit (population) variance along ``axis``, then scale and shift."""
    if eps <= 0:
        raise ContractError("layer_norm eps must be positive")
    axis = axis % x.ndim
    C = x.shape[axis]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeError(f"layer_norm: affine shapes {gamma.shape}/{beta.shape} do not match extent {C}")
    bshape = [1] * x.ndim
    bshape[axis] = C
    mu = x.data.mean(axis=axis, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gm = gamma.data.reshape(bshape)
    out = xhat * gm + beta.data.reshape(bshape)
    other = tuple(i for i in range(x.ndim) if i != axis)

    def bw(g):
        gx = None
        if x.requires_grad:
            gh = g * gm
            gx = inv * (gh - gh.mean(axis=axis, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=axis, keepdims=True))
        gg = (g * xhat).sum(axis=other) if gamma.requires_grad else None
        gb = g.sum(axis=other) if beta.requires_grad else None
        return gx, gg, gb

    return make_op(out, (x, gamma, beta), bw)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    m = x.data.max(axis=axis, keepdims=True)
    if np.any(np.isneginf(m)):
        raise DegenerateAxisError("softmax: every entry along the reduced axis is -inf")
    e = np.exp(x.data - m)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return make_op(y, (x,), bw)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    m = x.data.max(axis=axis, keepdims=True)
    if np.any(np.isneginf(m)):
        raise DegenerateAxisError("log_softmax: every entry along the reduced axis is -inf")
    z = x.data - m
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def bw(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return make_op(out, (x,), bw)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation: ``0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))``."""
    a = x.data
    a2 = a * a
    t = np.tanh(GELU_COEF * a * (1.0 + GELU_CUBIC * a2))
    out = 0.5 * a * (1.0 + t)

    def bw(g):
        dt = (1.0 - t * t) * GELU_COEF * (1.0 + 3.0 * GELU_CUBIC * a2)
        return (g * (0.5 * (1.0 + t) + 0.5 * a * dt),)

    return make_op(out, (x,), bw)


def _sigmoid_np(a: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    ea = np.exp(a[~pos])
    out[~pos] = ea / (1.0 + ea)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid_np(x.data)
    return make_op(s, (x,), lambda g: (g * s * (1.0 - s),))


def softplus(x: Tensor) -> Tensor:
    out = np.logaddexp(0.0, x.data).astype(x.dtype, copy=False)
    return make_op(out, (x,), lambda g: (g * _sigmoid_np(x.data),))


_ACTIVATIONS = {"gelu": gelu, "softplus": softplus, "sigmoid": sigmoid}


def activation(kind: str, x: Tensor) -> Tensor:
    try:
        fn = _ACTIVATIONS[kind.lower()]
    except KeyError:
        raise ConfigError(f"unknown activation {kind!r}; choose from {sorted(_ACTIVATIONS)}") from None
    return fn(x)


def global_avg_pool(x: Tensor) -> Tensor:
    """Spatial mean, ``(B, C, H, W) -> (B, C)``."""
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool expects (B,C,H,W), got {x.shape}")
    return x.mean(axis=(2, 3))


def upsample_nearest(x: Tensor, factor: int = 2) -> Tensor:
    B, C, H, W = x.shape
    out = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)

    def bw(g):
        return (g.reshape(B, C, H, factor, W, factor).sum(axis=(3, 5)),)

    return make_op(out, (x,), bw)


def take_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    """Rows ``x[idx]`` of a 2-D tensor; ``idx`` must not repeat."""
    out = x.data[idx]

    def bw(g):
        full = np.zeros_like(x.data)
        full[idx] = g
        return (full,)

    return make_op(out, (x,), bw)


def put_rows(values: Tensor, idx: np.ndarray, n_rows: int) -> Tensor:
    """Zero matrix with ``n_rows`` rows whose rows ``idx`` hold ``values``."""
    out = np.zeros((n_rows,) + values.shape[1:], dtype=values.dtype)
    out[idx] = values.data
    return make_op(out, (values,), lambda g: (g[idx],))


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under ``softmax(logits)``."""
    labels = np.asarray(labels, dtype=np.int64)
    logp = log_softmax(logits, axis=-1)
    picked = logp[np.arange(len(labels)), labels]
    return -picked.mean()


def l1_mean(a: Tensor, b) -> Tensor:
    b = as_tensor(b, dtype=a.dtype)
    if a.shape != b.shape:
        raise ShapeError(f"l1: shapes differ {a.shape} vs {b.shape}")
    return (a - b).abs().mean()
