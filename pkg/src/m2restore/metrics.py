"""Image-quality and clustering metrics.

SSIM convention: grayscale by channel mean, 8x8 windows at stride 4,
population statistics, ``c1 = (0.01 peak)^2`` and ``c2 = (0.03 peak)^2``,
averaged over windows.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, ShapeError

SSIM_WINDOW = 8
SSIM_STRIDE = 4


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def mse(a, b) -> float:
    a, b = _pair(a, b)
    d = a - b
    return float(np.mean(d * d))


def psnr(a, b, peak: float = 1.0) -> float:
    """``10 log10(peak^2 / MSE)`` in dB; identical inputs give ``inf``."""
    m = mse(a, b)
    if m == 0.0:
        return float("inf")
    return float(10.0 * np.log10(peak * peak / m))


def _gray(x: np.ndarray) -> np.ndarray:
    if x.ndim == 2:
        return x
    if x.ndim == 3:
        return x.mean(axis=0)
    raise ShapeError(f"ssim expects (H,W) or (C,H,W), got {x.shape}")


def _window_stats(x: np.ndarray):
    w = sliding_window_view(x, (SSIM_WINDOW, SSIM_WINDOW))[::SSIM_STRIDE, ::SSIM_STRIDE]
    mu = w.mean(axis=(-1, -2))
    dev = w - mu[..., None, None]
    return mu, dev


def ssim(a, b, peak: float = 1.0) -> float:
    a, b = _pair(a, b)
    ga, gb = _gray(a), _gray(b)
    if ga.shape[0] < SSIM_WINDOW or ga.shape[1] < SSIM_WINDOW:
        raise ShapeError(f"image {ga.shape} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    c1 = (0.01 * peak) ** 2
    c2 = (0.03 * peak) ** 2
    mu_a, da = _window_stats(ga)
    mu_b, db = _window_stats(gb)
    var_a = (da * da).mean(axis=(-1, -2))
    var_b = (db * db).mean(axis=(-1, -2))
    cov = (da * db).mean(axis=(-1, -2))
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def cosine_similarity(u, v) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        return 0.0
    return float(u @ v / (nu * nv))


def silhouette(vectors, labels) -> float:
    """Mean silhouette with Euclidean distance; a point with ``a = b = 0`` scores 0."""
    X = np.asarray(vectors, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    y = np.asarray(labels)
    if len(X) != len(y):
        raise ShapeError(f"{len(X)} vectors but {len(y)} labels")
    classes, counts = np.unique(y, return_counts=True)
    if len(classes) < 2 or counts.min() < 2:
        raise ContractError("degenerate clustering: need >= 2 labels with >= 2 members each")
    diff = X[:, None, :] - X[None, :, :]
    D = np.sqrt((diff * diff).sum(axis=-1))
    member = y[None, :] == classes[:, None]                     # (k, n)
    sums = D @ member.T.astype(np.float64)                     # (n, k) distance sums per cluster
    own = np.searchsorted(classes, y)
    idx = np.arange(len(y))
    a = sums[idx, own] / (counts[own] - 1)
    mean_other = sums / counts[None, :]
    mean_other[idx, own] = np.inf
    b = mean_other.min(axis=1)
    m = np.maximum(a, b)
    s = np.where(m > 0, (b - a) / np.where(m > 0, m, 1.0), 0.0)
    return float(s.mean())
