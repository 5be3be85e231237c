"""Degradation-aware sparse expert routing.

Per pixel ``i`` the router scores ``N`` experts from the joint feature
``x_p = [x; proj(T_task)]`` and a degradation bias::

    S       = x_p W_g + alpha * (d_g W_b)
    sigma   = softplus(x_p W_n)
    S_tilde = S + eps * N(0, sigma^2)        eps ~ Bernoulli(0.5)^N, train only
    Se      = softmax over the K largest entries of S_tilde (others exactly 0)
    y       = sum_n Se[:, n] * F_n(x)

Only experts that receive weight somewhere are evaluated, and each only on
the pixels that selected it.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from . import ops
from .errors import ContractError
from .nn import Linear, Module, parameter
from .tensor import Tensor, broadcast_to, concat, make_op

TRAIN, INFER = "train", "infer"


class RoutingNoise:
    """Seeded noise for the routing perturbation.

    The Bernoulli mask depends only on ``(seed, site)`` so every micro-batch of
    one optimizer step shares it; the Gaussian draws depend on the global
    sample id, making a split batch reproduce the unsplit one exactly.
    """

    def __init__(self, seed: int, sample_ids: Sequence[int]):
        self.seed = int(seed)
        self.sample_ids = [int(s) for s in sample_ids]

    @classmethod
    def from_generator(cls, rng: np.random.Generator, batch: int) -> "RoutingNoise":
        return cls(int(rng.integers(0, 2**62)), range(batch))

    def mask(self, site: int, n: int) -> np.ndarray:
        rng = np.random.default_rng([self.seed, site, 0])
        return (rng.random(n) < 0.5).astype(np.float64)

    def normal(self, site: int, shape: tuple) -> np.ndarray:
        draws = [np.random.default_rng([self.seed, site, 1, sid]).standard_normal(shape)
                 for sid in self.sample_ids]
        return np.stack(draws)


@dataclass
class RoutingState:
    """Diagnostics of one routing pass; arrays are ``(B, P, N)`` unless noted."""

    score: np.ndarray
    b: np.ndarray
    S: np.ndarray
    sigma: np.ndarray
    S_tilde: np.ndarray
    eps_mask: np.ndarray  # (N,)
    Se: np.ndarray
    Se_tensor: Optional[Tensor] = None
    site: int = 0

    @property
    def n_experts(self) -> int:
        return self.Se.shape[-1]

    def selection_counts(self) -> np.ndarray:
        """Number of pixels that selected each expert."""
        return (self.Se > 0).reshape(-1, self.n_experts).sum(axis=0)

    def to_table(self) -> tuple[list[str], np.ndarray]:
        """Flat table with one row per (sample, pixel)."""
        B, P, N = self.Se.shape
        sample = np.repeat(np.arange(B), P)[:, None]
        pixel = np.tile(np.arange(P), B)[:, None]
        cols = [sample, pixel]
        header = ["sample", "pixel"]
        for key in ("Se", "S_tilde", "S", "sigma"):
            cols.append(getattr(self, key).reshape(B * P, N))
            header += [f"{key}_{n}" for n in range(N)]
        return header, np.concatenate(cols, axis=1)


def joint_features(x: Tensor, T_task: Tensor, proj: Linear) -> Tensor:
    """``[x; broadcast(proj(T_task))]`` along channels, ``(B, 2d, H, W)``."""
    B, d, H, W = x.shape
    t = proj(T_task)
    if t.shape != (B, d):
        raise ContractError(f"projected prompt has shape {t.shape}, expected {(B, d)}")
    t = broadcast_to(t.reshape(B, d, 1, 1), (B, d, H, W))
    return concat([x, t], axis=1)


def _pixels(x_p: Tensor) -> Tensor:
    B, C, H, W = x_p.shape
    return x_p.reshape(B, C, H * W).transpose(0, 2, 1)


def route_scores(x_p: Tensor, d_g, W_g: Tensor, W_b: Tensor, alpha: Tensor):
    """Base scores, degradation bias and their gated sum, each ``(B, P, N)``."""
    xp = _pixels(x_p) if x_p.ndim == 4 else x_p
    d_g = d_g if isinstance(d_g, Tensor) else Tensor(np.atleast_2d(d_g), dtype=W_b.dtype)
    if d_g.shape[-1] != W_b.shape[0]:
        raise ContractError(f"d_g has {d_g.shape[-1]} classes, W_b expects {W_b.shape[0]}")
    score = ops.linear(xp, W_g)
    bias = ops.linear(d_g, W_b)
    b = broadcast_to(bias.reshape(bias.shape[0], 1, -1), score.shape)
    S = score + alpha * b
    return score, b, S


def perturb(S: Tensor, x_p: Tensor, W_n: Tensor, mode: str = TRAIN,
            rng: Union[np.random.Generator, RoutingNoise, None] = None, site: int = 0):
    """Noisy top-k perturbation. Returns ``(S_tilde, sigma, eps_mask)``."""
    xp = _pixels(x_p) if x_p.ndim == 4 else x_p
    sigma = ops.softplus(ops.linear(xp, W_n))
    N = S.shape[-1]
    if mode == INFER:
        return S, sigma, np.zeros(N)
    if mode != TRAIN:
        raise ContractError(f"mode must be 'train' or 'infer', got {mode!r}")
    if rng is None:
        raise ContractError("train mode needs a seeded random source")
    noise = rng if isinstance(rng, RoutingNoise) else RoutingNoise.from_generator(rng, S.shape[0])
    mask = noise.mask(site, N)
    z = noise.normal(site, S.shape[1:]).astype(S.dtype)
    S_tilde = S + sigma * Tensor(mask.astype(S.dtype) * z)
    return S_tilde, sigma, mask


def sparse_select(S_tilde: Tensor, K: int) -> Tensor:
    """Softmax over the K largest entries of each row; the rest are exactly zero.

    Ties go to the lower expert index.
    """
    v = S_tilde.data
    N = v.shape[-1]
    if not 1 <= K <= N:
        raise ContractError(f"need 1 <= K <= N, got K={K}, N={N}")
    top = np.argsort(-v, axis=-1, kind="stable")[..., :K]
    kept = np.take_along_axis(v, top, axis=-1)
    e = np.exp(kept - kept.max(axis=-1, keepdims=True))
    p = e / e.sum(axis=-1, keepdims=True)
    out = np.zeros_like(v)
    np.put_along_axis(out, top, p, axis=-1)

    def bw(g):
        gk = np.take_along_axis(g, top, axis=-1)
        gp = p * (gk - (gk * p).sum(axis=-1, keepdims=True))
        full = np.zeros_like(v)
        np.put_along_axis(full, top, gp, axis=-1)
        return (full,)

    return make_op(out, (S_tilde,), bw)


class Expert(Module):
    """Residual pointwise MLP: ``x + W2 GELU(W1 x + b1) + b2`` on rows of ``(P, d)``."""

    def __init__(self, d: int, expansion: float, rng: np.random.Generator, out_scale: float = 0.5):
        super().__init__()
        h = int(round(d * expansion))
        self.fc1 = Linear(d, h, rng)
        self.fc2 = Linear(h, d, rng, std=out_scale / np.sqrt(h))

    def __call__(self, rows: Tensor) -> Tensor:
        return rows + self.fc2(ops.gelu(self.fc1(rows)))


class ExpertBank(Module):
    def __init__(self, n: int, d: int, expansion: float, rng: np.random.Generator):
        super().__init__()
        self.experts = [Expert(d, expansion, rng) for _ in range(n)]

    def __len__(self):
        return len(self.experts)

    def __getitem__(self, i):
        return self.experts[i]


def _rows(x: Tensor) -> Tensor:
    B, d, H, W = x.shape
    return x.transpose(0, 2, 3, 1).reshape(B * H * W, d)


def _unrows(y: Tensor, shape) -> Tensor:
    B, d, H, W = shape
    return y.reshape(B, H, W, d).transpose(0, 3, 1, 2)


def dispatch(x: Tensor, Se: Tensor, bank: ExpertBank) -> Tensor:
    """``y(i) = sum_n Se(i, n) F_n(x)(i)``, evaluating each expert only where it was selected."""
    B, d, H, W = x.shape
    N = len(bank)
    if Se.shape != (B, H * W, N):
        raise ContractError(f"Se has shape {Se.shape}, expected {(B, H * W, N)}")
    rows = _rows(x)
    weights = Se.reshape(B * H * W, N)
    total = None
    for n in range(N):
        idx = np.flatnonzero(weights.data[:, n] != 0)
        if idx.size == 0:
            continue
        if idx.size == rows.shape[0]:
            contrib = bank[n](rows) * weights[:, n:n + 1]
        else:
            sel = bank[n](ops.take_rows(rows, idx)) * ops.take_rows(weights[:, n:n + 1], idx)
            contrib = ops.put_rows(sel, idx, rows.shape[0])
        total = contrib if total is None else total + contrib
    if total is None:
        raise ContractError("no expert received any routing weight")
    return _unrows(total, x.shape)


def dispatch_dense(x: Tensor, Se: Tensor, bank: ExpertBank) -> Tensor:
    """Every expert on every pixel; reference for :func:`dispatch`."""
    rows = _rows(x)
    weights = Se.reshape(rows.shape[0], len(bank))
    total = None
    for n in range(len(bank)):
        contrib = bank[n](rows) * weights[:, n:n + 1]
        total = contrib if total is None else total + contrib
    return _unrows(total, x.shape)


class DDER(Module):
    """Router parameters plus expert bank for one encoder level."""

    def __init__(self, d: int, prompt_dim: int, n_classes: int, n_experts: int, top_k: int,
                 rng: np.random.Generator, expert_expansion: float = 2.0, site: int = 0):
        super().__init__()
        if not 1 <= top_k <= n_experts:
            raise ContractError(f"need 1 <= K <= N, got K={top_k}, N={n_experts}")
        self.prompt_proj = Linear(prompt_dim, d, rng)
        std = 1.0 / np.sqrt(2 * d)
        self.W_g = parameter(rng.normal(0.0, std, size=(2 * d, n_experts)))
        self.W_b = parameter(rng.normal(0.0, 1.0, size=(n_classes, n_experts)))
        self.W_n = parameter(rng.normal(0.0, 0.1 * std, size=(2 * d, n_experts)))
        self.alpha = parameter(np.ones(n_experts))
        self.bank = ExpertBank(n_experts, d, expert_expansion, rng)
        self.K = top_k
        self.site = site

    @property
    def N(self) -> int:
        return len(self.bank)

    def __call__(self, x: Tensor, T_task: Tensor, d_g, mode: str = INFER, rng=None):
        return dder_forward(x, T_task, d_g, self, mode, rng)


def dder_forward(x: Tensor, T_task: Tensor, d_g, router: DDER, mode: str = INFER, rng=None):
    """Full routing pass. Returns ``(y, RoutingState)``."""
    x_p = joint_features(x, T_task, router.prompt_proj)
    xp = _pixels(x_p)
    score, b, S = route_scores(xp, d_g, router.W_g, router.W_b, router.alpha)
    S_tilde, sigma, mask = perturb(S, xp, router.W_n, mode, rng, site=router.site)
    Se = sparse_select(S_tilde, router.K)
    y = dispatch(x, Se, router.bank)
    state = RoutingState(score=score.data, b=b.data, S=S.data, sigma=sigma.data, S_tilde=S_tilde.data,
                         eps_mask=mask, Se=Se.data, Se_tensor=Se, site=router.site)
    return y, state
