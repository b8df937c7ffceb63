"""Network building blocks on top of the autodiff engine."""

from . import functional
from .layers import Conv3d, ConvNormAct, InstanceNorm3d, Linear, Module, ResidualBlock
from .optim import Optimizer, OptimizerConfig, optimizer_step

__all__ = [
    "Conv3d", "ConvNormAct", "InstanceNorm3d", "Linear", "Module", "Optimizer", "OptimizerConfig",
    "ResidualBlock", "functional", "optimizer_step",
]
