"""Encoder / bottleneck / decoder assembly and ablation variants.

Level ``l`` of the encoder runs ``blocks[l]`` transformer blocks and then a
router (or, in the ``no_dder`` variant, one more transformer block). The
deepest level feeds the dual-branch bottleneck. The decoder mirrors the
encoder with skip connections; its frequency-learning slot is an identity
hook. The output is a global residual: ``restored = I + head(features)``.
"""

from __future__ import annotations

from typing import Callable, Optional

import numpy as np

from .config import ModelConfig
from .errors import ConfigError, ContractError
from .mcdb import MCDB
from .nn import BlockParams, Conv2d, Downsample, Module, PatchEmbed, Sequential, TransformerBlock, Upsample
from .prompt import DegradationPrior, PromptGenerator
from .router import DDER, INFER, RoutingState
from .tensor import Tensor, concat


class FrequencySlot(Module):
    """Identity pass-through; ``hook`` may be set to a callable to plug a real block in."""

    def __init__(self):
        super().__init__()
        self.hook: Optional[Callable[[Tensor], Tensor]] = None

    def __call__(self, x: Tensor) -> Tensor:
        return x if self.hook is None else self.hook(x)


class M2Restore(Module):
    def __init__(self, cfg: ModelConfig, rng: Optional[np.random.Generator] = None):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        rng = rng if rng is not None else np.random.default_rng(cfg.init_seed)
        ch = cfg.channels
        self.uses_router = cfg.variant != "no_dder"
        self.embed = PatchEmbed(ch[0], rng)
        if self.uses_router:
            self.prompt = PromptGenerator(cfg.prompts, cfg.prompt_dim, rng)
        self.encoders = [Sequential([TransformerBlock(BlockParams(ch[i], cfg.expansion, cfg.heads[i]), rng)
                               for _ in range(cfg.blocks[i])]) for i in range(cfg.levels)]
        if self.uses_router:
            self.routers = [DDER(ch[i], cfg.prompt_dim, cfg.classes, cfg.n_experts, cfg.top_k, rng,
                                 cfg.expert_expansion, site=i) for i in range(cfg.levels)]
        else:
            self.routers = [TransformerBlock(BlockParams(ch[i], cfg.expansion, cfg.heads[i]), rng)
                            for i in range(cfg.levels)]
        self.downs = [Downsample(ch[i], rng) for i in range(cfg.levels - 1)]
        if cfg.variant == "dder_only":
            self.bottleneck = TransformerBlock(BlockParams(ch[-1], cfg.expansion, cfg.heads[-1]), rng)
        else:
            self.bottleneck = MCDB(ch[-1], cfg.ssm_state, cfg.prior_dim, rng,
                                   static_gate=0.5 if cfg.variant == "no_dgf" else None)
        self.ups = [Upsample(ch[i + 1], rng) for i in range(cfg.levels - 1)]
        self.merges = [Conv2d(2 * ch[i], ch[i], 1, rng) for i in range(cfg.levels - 1)]
        self.decoders = [Sequential([TransformerBlock(BlockParams(ch[i], cfg.expansion, cfg.heads[i]), rng)
                               for _ in range(cfg.decoder_blocks[i])]) for i in range(cfg.levels - 1)]
        self.freq = [FrequencySlot() for _ in range(cfg.levels - 1)]
        self.head = Conv2d(ch[0], 3, 3, zero_init=True)
        self.assign_names()

    @property
    def multiple(self) -> int:
        return 2 ** (self.cfg.levels - 1)

    def bottleneck_forward(self, x: Tensor, P_f) -> Tensor:
        if isinstance(self.bottleneck, MCDB):
            return x + self.bottleneck(x, P_f)
        return self.bottleneck(x)

    def __call__(self, image: Tensor, prior: DegradationPrior, mode: str = INFER, noise=None):
        return forward(self, image, prior, mode, noise)


def forward(model: M2Restore, image: Tensor, prior: DegradationPrior, mode: str = INFER, noise=None):
    """Restore ``image (B,3,H,W)``. Returns ``(restored, [RoutingState per router])``."""
    if not isinstance(image, Tensor):
        image = Tensor(np.asarray(image))
    B, _, H, W = image.shape
    m = model.multiple
    if H % m or W % m:
        raise ContractError(f"spatial size {H}x{W} must be a multiple of {m}")
    if len(prior) != B:
        raise ContractError(f"prior batch {len(prior)} does not match image batch {B}")
    cfg = model.cfg
    d_g = Tensor(prior.d_g, dtype=image.dtype)
    P_f = Tensor(prior.P_f, dtype=image.dtype)
    diagnostics: list[RoutingState] = []
    x = model.embed(image)
    T_task = model.prompt(image) if model.uses_router else None
    skips = []
    for lvl in range(cfg.levels):
        x = model.encoders[lvl](x)
        if model.uses_router:
            x, state = model.routers[lvl](x, T_task, d_g, mode, noise)
            diagnostics.append(state)
        else:
            x = model.routers[lvl](x)
        if lvl < cfg.levels - 1:
            skips.append(x)
            x = model.downs[lvl](x)
    x = model.bottleneck_forward(x, P_f)
    for lvl in reversed(range(cfg.levels - 1)):
        x = model.ups[lvl](x)
        x = model.merges[lvl](concat([x, skips[lvl]], axis=1))
        x = model.decoders[lvl](x)
        x = model.freq[lvl](x)
    return image + model.head(x), diagnostics


def build_variant(cfg: ModelConfig, rng: Optional[np.random.Generator] = None) -> M2Restore:
    """Construct one of the four ablation topologies named by ``cfg.variant``."""
    if cfg.variant not in ("full", "no_dgf", "no_dder", "dder_only"):
        raise ConfigError(f"unknown variant {cfg.variant!r}")
    return M2Restore(cfg, rng)
