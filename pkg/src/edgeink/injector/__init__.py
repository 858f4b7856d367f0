from .bundle import (
    InjectorBundle,
    InjectorConfig,
    LossWeights,
    discriminate,
    guidance_extract,
    inject,
)
from .interference import InterferenceConfig, InterferenceOp, interfere
from .losses import LossBreakdown, compute_losses
from .training import evaluate_losses, train_injector

__all__ = [
    "InjectorBundle",
    "InjectorConfig",
    "InterferenceConfig",
    "InterferenceOp",
    "LossBreakdown",
    "LossWeights",
    "compute_losses",
    "discriminate",
    "evaluate_losses",
    "guidance_extract",
    "inject",
    "interfere",
    "train_injector",
]
