"""Parameter containers and composite blocks.

The transformer block here is a channel-attention design: attention is taken
across channels within each head (a ``c x c`` map per head), which keeps the
cost linear in the number of pixels.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np

from . import ops
from .errors import ConfigError, ContractError, ShapeError
from .tensor import Tensor, default_dtype


def parameter(data, name: Optional[str] = None) -> Tensor:
    return Tensor(np.array(data, dtype=default_dtype()), requires_grad=True, name=name)


class Module:
    """Tree of named parameters, loosely modelled on ``torch.nn.Module``."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_children", {})

    def __setattr__(self, key, value):
        if isinstance(value, Tensor) and value.requires_grad:
            self._params[key] = value
            self._children.pop(key, None)
        elif isinstance(value, Module):
            self._children[key] = value
            self._params.pop(key, None)
        elif isinstance(value, (list, tuple)) and value and all(isinstance(v, Module) for v in value):
            self._children[key] = ModuleList(value)
            value = self._children[key]
        object.__setattr__(self, key, value)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for k, p in self._params.items():
            yield prefix + k, p
        for k, child in self._children.items():
            yield from child.named_parameters(prefix + k + ".")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def assign_names(self) -> None:
        for name, p in self.named_parameters():
            p.name = name

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data for k, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        if missing:
            raise KeyError(f"state is missing parameters: {sorted(missing)[:5]}")
        for k, p in own.items():
            arr = np.asarray(state[k])
            if arr.shape != p.shape:
                raise ShapeError(f"parameter {k}: stored shape {arr.shape} != model shape {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)


class ModuleList(Module):
    def __init__(self, modules):
        super().__init__()
        object.__setattr__(self, "_items", list(modules))
        for i, m in enumerate(self._items):
            self._children[str(i)] = m

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i):
        return self._items[i]


class Sequential(ModuleList):
    def __call__(self, x):
        for m in self._items:
            x = m(x)
        return x


def _he(rng: np.random.Generator, shape, fan_in: int, gain: float = 1.0) -> np.ndarray:
    return rng.normal(0.0, gain * np.sqrt(2.0 / fan_in), size=shape)


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, kernel: int = 3, rng: Optional[np.random.Generator] = None,
                 stride: int = 1, groups: int = 1, bias: bool = True, zero_init: bool = False,
                 gain: float = 1.0):
        super().__init__()
        if c_in % groups or c_out % groups:
            raise ConfigError(f"groups={groups} must divide in/out channels ({c_in}, {c_out})")
        shape = (c_out, c_in // groups, kernel, kernel)
        if zero_init or rng is None:
            w = np.zeros(shape)
        else:
            w = _he(rng, shape, (c_in // groups) * kernel * kernel, gain)
        self.weight = parameter(w)
        self.bias = parameter(np.zeros(c_out)) if bias else None
        self.stride = stride
        self.groups = groups

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, groups=self.groups, padding="same", stride=self.stride)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: Optional[np.random.Generator] = None, bias: bool = True,
                 std: Optional[float] = None):
        super().__init__()
        if rng is None:
            w = np.zeros((d_in, d_out))
        else:
            w = rng.normal(0.0, std if std is not None else 1.0 / np.sqrt(d_in), size=(d_in, d_out))
        self.weight = parameter(w)
        self.bias = parameter(np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return ops.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    """LayerNorm over one axis (``axis=1`` for channels-first feature maps)."""

    def __init__(self, channels: int, axis: int = 1, eps: float = 1e-5):
        super().__init__()
        self.gamma = parameter(np.ones(channels))
        self.beta = parameter(np.zeros(channels))
        self.axis = axis
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ops.layer_norm(x, self.gamma, self.beta, self.eps, axis=self.axis)


@dataclass(frozen=True)
class BlockParams:
    channels: int
    expansion: float = 2.0
    heads: int = 1

    def __post_init__(self):
        if self.channels < 1 or self.heads < 1 or self.channels % self.heads:
            raise ConfigError(f"channels ({self.channels}) must be divisible by heads ({self.heads})")
        if self.expansion < 1:
            raise ConfigError(f"expansion must be >= 1, got {self.expansion}")


class ChannelAttention(Module):
    def __init__(self, channels: int, heads: int, rng: np.random.Generator):
        super().__init__()
        self.heads = heads
        self.qkv = Conv2d(channels, 3 * channels, 1, rng)
        self.temperature = parameter(np.ones(heads))
        self.proj = Conv2d(channels, channels, 1, rng)

    def __call__(self, x: Tensor) -> Tensor:
        B, C, H, W = x.shape
        h, c = self.heads, C // self.heads
        qkv = self.qkv(x).reshape(B, 3, h, c, H * W)
        q, k, v = qkv[:, 0], qkv[:, 1], qkv[:, 2]
        q = q / (((q * q).sum(axis=-1, keepdims=True) + 1e-12) ** 0.5)
        k = k / (((k * k).sum(axis=-1, keepdims=True) + 1e-12) ** 0.5)
        logits = (q @ k.transpose(0, 1, 3, 2)) * self.temperature.reshape(1, h, 1, 1)
        attn = ops.softmax(logits, axis=-1)
        out = (attn @ v).reshape(B, C, H, W)
        return self.proj(out)


class FeedForward(Module):
    def __init__(self, channels: int, expansion: float, rng: np.random.Generator):
        super().__init__()
        hidden = int(round(channels * expansion))
        self.fc1 = Conv2d(channels, hidden, 1, rng)
        self.fc2 = Conv2d(hidden, channels, 1, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(ops.gelu(self.fc1(x)))


class TransformerBlock(Module):
    """``F + Attn(LN(F))`` followed by ``F + FFN(LN(F))``."""

    def __init__(self, p: BlockParams, rng: np.random.Generator):
        super().__init__()
        self.params = p
        self.norm1 = LayerNorm(p.channels)
        self.attn = ChannelAttention(p.channels, p.heads, rng)
        self.norm2 = LayerNorm(p.channels)
        self.ffn = FeedForward(p.channels, p.expansion, rng)

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.params.channels:
            raise ConfigError(f"transformer block built for {self.params.channels} channels got input {x.shape}")
        x = x + self.attn(self.norm1(x))
        return x + self.ffn(self.norm2(x))

    def zero_sublayers(self) -> None:
        """Zero the output projections so the block is exactly the identity."""
        for conv in (self.attn.proj, self.ffn.fc2):
            conv.weight.data[...] = 0
            conv.bias.data[...] = 0


class PatchEmbed(Module):
    """3x3 same-padded convolution lifting RGB to ``channels`` feature maps."""

    def __init__(self, channels: int, rng: np.random.Generator, c_in: int = 3):
        super().__init__()
        self.proj = Conv2d(c_in, channels, 3, rng)

    def __call__(self, image: Tensor) -> Tensor:
        if image.ndim != 4 or image.shape[2] < 8 or image.shape[3] < 8:
            raise ContractError(f"patch_embed expects (B,3,H,W) with H,W >= 8, got {image.shape}")
        return self.proj(image)


class Downsample(Module):
    """Strided 3x3 convolution, ``(B,C,H,W) -> (B,2C,H/2,W/2)``."""

    def __init__(self, channels: int, rng: np.random.Generator):
        super().__init__()
        self.conv = Conv2d(channels, 2 * channels, 3, rng, stride=2)

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[2] % 2 or x.shape[3] % 2:
            raise ContractError(f"downsample needs even spatial extents, got {x.shape[2:]}")
        return self.conv(x)


class Upsample(Module):
    """Nearest-neighbour x2 followed by a 1x1 conv halving the channels."""

    def __init__(self, channels: int, rng: np.random.Generator):
        super().__init__()
        if channels % 2:
            raise ContractError(f"upsample needs an even channel count, got {channels}")
        self.conv = Conv2d(channels, channels // 2, 1, rng)

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[1] % 2:
            raise ContractError(f"upsample needs an even channel count, got {x.shape[1]}")
        return self.conv(ops.upsample_nearest(x, 2))
