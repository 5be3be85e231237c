"""Task-prompt generation and degradation-prior providers.

The prompt generator pools a small convolution stack over the input image,
projects it to one weight per base prompt and mixes the prompt library:
``T_task = GELU(softmax(W_l GAP(Convs(I))) @ tau)``.

A degradation prior is a class-probability vector ``d_g`` plus a feature
vector ``P_f``. Two providers share one calling convention,
``provider(images, labels) -> DegradationPrior``: an oracle driven by the
ground-truth label and a small trainable classifier driven by the image.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import ops
from .errors import ContractError, ProviderNotReadyError
from .nn import Conv2d, Linear, Module, parameter
from .tensor import Tensor, no_grad


@dataclass
class DegradationPrior:
    """Batched prior: ``d_g`` is ``(B, D)``, ``P_f`` is ``(B, F_p)``."""

    d_g: np.ndarray
    P_f: np.ndarray

    def __post_init__(self):
        self.d_g = np.atleast_2d(self.d_g)
        self.P_f = np.atleast_2d(self.P_f)
        if self.d_g.shape[0] != self.P_f.shape[0]:
            raise ContractError("d_g and P_f batch extents differ")

    def __len__(self):
        return self.d_g.shape[0]

    def select(self, idx) -> "DegradationPrior":
        return DegradationPrior(self.d_g[idx], self.P_f[idx])


class PromptLibrary(Module):
    def __init__(self, n_prompts: int, width: int, rng: np.random.Generator):
        super().__init__()
        if n_prompts < 2:
            raise ContractError("a prompt library needs at least two prompts")
        self.tau = parameter(rng.normal(0.0, 1.0, size=(n_prompts, width)))


def task_prompt(q: Tensor, lib: PromptLibrary) -> Tensor:
    """``GELU(q @ tau)``: one prompt vector of width M per image."""
    if q.shape[-1] != lib.tau.shape[0]:
        raise ContractError(f"prompt weights have {q.shape[-1]} entries, library has {lib.tau.shape[0]} rows")
    return ops.gelu(q @ lib.tau)


class PromptGenerator(Module):
    """Conv cascade -> GAP -> linear -> softmax over the prompt library."""

    def __init__(self, n_prompts: int, width: int, rng: np.random.Generator, hidden: int = 16):
        super().__init__()
        self.convs = [Conv2d(3, hidden, 3, rng, stride=2), Conv2d(hidden, hidden, 3, rng, stride=2)]
        self.proj = Linear(hidden, n_prompts, rng)
        self.library = PromptLibrary(n_prompts, width, rng)

    def prompt_weights(self, image: Tensor) -> Tensor:
        h = image
        for conv in self.convs:
            h = ops.gelu(conv(h))
        return ops.softmax(self.proj(ops.global_avg_pool(h)), axis=-1)

    def __call__(self, image: Tensor) -> Tensor:
        return task_prompt(self.prompt_weights(image), self.library)


class OracleProvider:
    """Label-driven stand-in for a frozen degradation encoder.

    ``d_g`` is the one-hot label with every other class lifted to
    ``smoothing``; ``P_f`` is a fixed random embedding per class drawn from
    ``seed``.
    """

    def __init__(self, n_classes: int, feature_dim: int, seed: int = 1234, smoothing: float = 0.02):
        if n_classes < 2:
            raise ContractError("need at least two degradation classes")
        if smoothing * (n_classes - 1) >= 1:
            raise ContractError("smoothing too large for the number of classes")
        self.n_classes = n_classes
        self.feature_dim = feature_dim
        self.seed = seed
        self.smoothing = smoothing
        rng = np.random.default_rng(seed)
        self.embeddings = rng.normal(0.0, 1.0, size=(n_classes, feature_dim))

    def _label(self, label) -> int:
        label = int(label)
        if 0 <= label < self.n_classes:
            return label
        return self.n_classes - 1  # last class is "unknown"

    def prior(self, label) -> DegradationPrior:
        j = self._label(label)
        d = np.full(self.n_classes, self.smoothing)
        d[j] = 1.0 - self.smoothing * (self.n_classes - 1)
        return DegradationPrior(d, self.embeddings[j].copy())

    def __call__(self, images, labels) -> DegradationPrior:
        if labels is None:
            labels = [self.n_classes - 1] * len(images)
        items = [self.prior(lb) for lb in labels]
        return DegradationPrior(np.concatenate([p.d_g for p in items]), np.concatenate([p.P_f for p in items]))


def oracle_prior(label, n_classes: int = 5, feature_dim: int = 64, seed: int = 1234) -> DegradationPrior:
    return OracleProvider(n_classes, feature_dim, seed).prior(label)


class DegradationClassifier(Module):
    """Four strided 3x3 conv layers; pooled features double as ``P_f``."""

    def __init__(self, n_classes: int, feature_dim: int, rng: np.random.Generator):
        super().__init__()
        widths = (3, 16, 32, 32, feature_dim)
        self.convs = [Conv2d(a, b, 3, rng, stride=2 if i < 3 else 1) for i, (a, b) in enumerate(zip(widths, widths[1:]))]
        self.head = Linear(feature_dim, n_classes, rng)

    def features(self, image: Tensor) -> Tensor:
        # centred, rescaled input: raw [0,1] pixels train far more slowly
        h = (image - 0.5) * 4.0
        for conv in self.convs:
            h = ops.gelu(conv(h))
        return ops.global_avg_pool(h)

    def __call__(self, image: Tensor) -> Tensor:
        return self.head(self.features(image))


class LearnedProvider:
    """Degradation prior predicted from the image by a trained classifier."""

    def __init__(self, n_classes: int, feature_dim: int, rng: Optional[np.random.Generator] = None):
        self.n_classes = n_classes
        self.feature_dim = feature_dim
        self.net = DegradationClassifier(n_classes, feature_dim, rng or np.random.default_rng(0))
        self.net.assign_names()
        self.trained = False

    def prior_from_images(self, images) -> DegradationPrior:
        if not self.trained:
            raise ProviderNotReadyError("learned degradation prior has not been trained")
        x = images if isinstance(images, Tensor) else Tensor(np.asarray(images))
        with no_grad():
            feats = self.net.features(x)
            probs = ops.softmax(self.net.head(feats), axis=-1)
        return DegradationPrior(probs.data.astype(np.float64), feats.data.astype(np.float64))

    def __call__(self, images, labels=None) -> DegradationPrior:
        return self.prior_from_images(images)

    def predict(self, images) -> np.ndarray:
        return self.prior_from_images(images).d_g.argmax(axis=1)


def learned_prior(provider: LearnedProvider, image) -> DegradationPrior:
    return provider.prior_from_images(image)
