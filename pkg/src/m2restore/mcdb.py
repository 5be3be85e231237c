"""Mamba-CNN dual-branch bottleneck with dynamic gated fusion.

    F_cnn   = GELU(PWConv1x1(DWConv3x3(LN(F))))
    F_mamba = reshape(LN(out_proj(scan(in_proj(LN(flatten(F)))))))
    G       = sigmoid(Conv1x1([F; proj(P_f)]))
    F_out   = G * F_cnn + (1 - G) * F_mamba
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from . import ops
from .nn import Conv2d, LayerNorm, Linear, Module, parameter
from .ssm import DEFAULT_CHUNK, ssm_scan
from .tensor import Tensor, broadcast_to, concat


class SSMLayer(Module):
    """Selective SSM with input-dependent ``B_t``, ``C_t`` and scalar step ``delta_t``.

    As in Mamba, the scan runs at an inner width ``expand * channels`` between
    a linear input projection and a linear output projection.
    """

    def __init__(self, channels: int, state: int, rng: np.random.Generator,
                 delta_init: float = 0.1, chunk: int = DEFAULT_CHUNK, expand: int = 2):
        super().__init__()
        inner = expand * channels
        self.in_proj = Linear(channels, inner, rng, bias=False)
        self.A_log = parameter(np.log(np.tile(np.arange(1, state + 1, dtype=np.float64), (inner, 1))))
        self.proj_B = Linear(inner, state, rng, bias=False)
        self.proj_C = Linear(inner, state, rng, bias=False)
        self.proj_delta = Linear(inner, 1, rng, std=0.1 / np.sqrt(inner))
        self.proj_delta.bias.data[...] = np.log(np.expm1(delta_init))
        self.out_proj = Linear(inner, channels, rng, bias=False)
        self.chunk = chunk

    def A(self) -> Tensor:
        return -self.A_log.exp()

    def scan(self, v: Tensor) -> Tensor:
        """The bare selective scan at inner width, ``(B, L, E) -> (B, L, E)``."""
        delta = ops.softplus(self.proj_delta(v))
        return ssm_scan(v, delta, self.A(), self.proj_B(v), self.proj_C(v), chunk=self.chunk)

    def __call__(self, u: Tensor) -> Tensor:
        """``u (B, L, C) -> (B, L, C)``."""
        return self.out_proj(self.scan(self.in_proj(u)))


class CNNBranch(Module):
    """Depthwise separable 3x3 convolution: per-channel 3x3, then a pointwise 1x1 mix."""

    def __init__(self, channels: int, rng: np.random.Generator):
        super().__init__()
        self.norm = LayerNorm(channels)
        self.dwconv = Conv2d(channels, channels, 3, rng, groups=channels)
        self.pwconv = Conv2d(channels, channels, 1, rng)

    def __call__(self, F: Tensor) -> Tensor:
        return ops.gelu(self.pwconv(self.dwconv(self.norm(F))))


class MambaBranch(Module):
    def __init__(self, channels: int, state: int, rng: np.random.Generator):
        super().__init__()
        self.norm_in = LayerNorm(channels, axis=-1)
        self.ssm = SSMLayer(channels, state, rng)
        self.norm_out = LayerNorm(channels, axis=-1)

    def __call__(self, F: Tensor) -> Tensor:
        B, C, H, W = F.shape
        seq = F.reshape(B, C, H * W).transpose(0, 2, 1)       # row-major flattening, (B, L, C)
        y = self.norm_out(self.ssm(self.norm_in(seq)))
        return y.transpose(0, 2, 1).reshape(B, C, H, W)


class GatedFusion(Module):
    """Per-pixel, per-channel gate in (0, 1) from features and the degradation embedding."""

    def __init__(self, channels: int, prior_dim: int, rng: np.random.Generator):
        super().__init__()
        self.proj_pf = Linear(prior_dim, channels, rng)
        self.gate_conv = Conv2d(2 * channels, channels, 1, rng, gain=0.5)

    def __call__(self, F: Tensor, P_f) -> Tensor:
        B, C, H, W = F.shape
        pf = P_f if isinstance(P_f, Tensor) else Tensor(np.atleast_2d(P_f), dtype=F.dtype)
        p = broadcast_to(self.proj_pf(pf).reshape(B, C, 1, 1), (B, C, H, W))
        return ops.sigmoid(self.gate_conv(concat([F, p], axis=1)))


def fuse(G, F_cnn: Tensor, F_mamba: Tensor) -> Tensor:
    """``G * F_cnn + (1 - G) * F_mamba``; ``G`` may be a tensor or a constant."""
    return G * F_cnn + (1.0 - G) * F_mamba


class MCDB(Module):
    """Dual-branch block. ``static_gate`` replaces the learned gate by a constant (ablation)."""

    def __init__(self, channels: int, state: int, prior_dim: int, rng: np.random.Generator,
                 static_gate: Optional[float] = None):
        super().__init__()
        self.cnn = CNNBranch(channels, rng)
        self.mamba = MambaBranch(channels, state, rng)
        self.static_gate = static_gate
        if static_gate is None:
            self.gate = GatedFusion(channels, prior_dim, rng)

    def branches(self, F: Tensor, P_f):
        F_cnn = self.cnn(F)
        F_mamba = self.mamba(F)
        G = self.static_gate if self.static_gate is not None else self.gate(F, P_f)
        return F_cnn, F_mamba, G

    def __call__(self, F: Tensor, P_f, gate_override=None) -> Tensor:
        F_cnn, F_mamba, G = self.branches(F, P_f)
        if gate_override is not None:
            G = gate_override
        return fuse(G, F_cnn, F_mamba)


def mcdb_forward(F: Tensor, P_f, block: MCDB, gate_override=None) -> Tensor:
    return block(F, P_f, gate_override)
