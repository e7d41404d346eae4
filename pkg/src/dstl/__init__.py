"""Asymmetric teacher-student distillation for distortion-robust image
encoders: corruption operators, a small ViT with exact gradients,
three-level alignment losses, training loops, and evaluation harnesses.
"""

from .distill import DistillWeights, LossBreakdown
from .distortions import DistortionKind, DistortionSpec
from .encoder import ViTConfig
from .trainer import TrainConfig, TrainMode

__version__ = "0.1.0"

__all__ = [
    "DistillWeights",
    "LossBreakdown",
    "DistortionKind",
    "DistortionSpec",
    "ViTConfig",
    "TrainConfig",
    "TrainMode",
    "__version__",
]
