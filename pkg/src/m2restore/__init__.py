"""Desk-scale M2Restore: degradation-aware expert routing with a Mamba-CNN bottleneck."""

from .config import DegradeParams, ModelConfig, RunConfig, TrainSettings
from .model import M2Restore, build_variant, forward
from .prompt import DegradationPrior, LearnedProvider, OracleProvider
from .tensor import Tensor, backward, no_grad, using_dtype

__all__ = [
    "DegradeParams", "DegradationPrior", "LearnedProvider", "M2Restore", "ModelConfig", "OracleProvider",
    "RunConfig", "Tensor", "TrainSettings", "backward", "build_variant", "forward", "no_grad", "using_dtype",
]
