"""From-scratch CPU tensor layers and the quantile-head regression CNN."""

from .gradcheck import GradCheckResult, check_network_gradients
from .layers import (
    AvgPool2x2,
    Conv3x3,
    Dropout,
    GlobalAvgPool,
    Linear,
    Parameter,
    ReLU,
    ResidualBlock,
    ScaleShift,
)
from .model import ModelConfig, QuantileNet

__all__ = [
    "AvgPool2x2",
    "Conv3x3",
    "Dropout",
    "GlobalAvgPool",
    "GradCheckResult",
    "Linear",
    "ModelConfig",
    "Parameter",
    "QuantileNet",
    "ReLU",
    "ResidualBlock",
    "ScaleShift",
    "check_network_gradients",
]
