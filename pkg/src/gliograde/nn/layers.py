"""Parameterised layers and a minimal ``Module`` container."""

import numpy as np

from ..errors import CheckpointError
from ..tensor import Tensor
from . import functional as F


def _uniform(rng, bound, shape):
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(np.float32), requires_grad=True)


class Module:
    """Parameters are discovered from attributes in assignment order, so names are stable."""

    def named_parameters(self, prefix=""):
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self):
        return dict(self.named_parameters())

    def zero_grad(self):
        for p in self.parameters().values():
            p.grad = None

    def state_dict(self):
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state):
        params = self.parameters()
        missing = [n for n in params if n not in state]
        extra = [n for n in state if n not in params]
        if missing or extra:
            raise CheckpointError(
                f"checkpoint does not match network: missing {missing[:5]}, unexpected {extra[:5]}"
            )
        for name, p in params.items():
            value = np.asarray(state[name])
            if value.shape != p.shape:
                raise CheckpointError(f"tensor {name!r}: checkpoint shape {value.shape} != network {p.shape}")
            p.data = value.astype(np.float32, copy=True)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Conv3d(Module):
    """Cubic-kernel 3D convolution; weights uniform in +-sqrt(1/fan_in)."""

    def __init__(self, in_channels, out_channels, kernel, rng, stride=1, padding=None):
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = kernel
        self.stride = stride
        self.padding = kernel // 2 if padding is None else padding
        bound = np.sqrt(1.0 / (in_channels * kernel**3))
        self.weight = _uniform(rng, bound, (out_channels, in_channels, kernel, kernel, kernel))
        self.bias = _uniform(rng, bound, (out_channels,))

    def forward(self, x):
        return F.conv3d(x, self.weight, self.bias, self.stride, self.padding)


class InstanceNorm3d(Module):
    def __init__(self, channels, eps=1e-5):
        self.eps = eps
        self.gamma = Tensor(np.ones(channels, np.float32), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, np.float32), requires_grad=True)

    def forward(self, x):
        return F.instance_norm(x, self.gamma, self.beta, self.eps)


class Linear(Module):
    def __init__(self, in_features, out_features, rng):
        bound = np.sqrt(1.0 / in_features)
        self.weight = _uniform(rng, bound, (out_features, in_features))
        self.bias = _uniform(rng, bound, (out_features,))

    def forward(self, x):
        return F.linear(x, self.weight, self.bias)


class ConvNormAct(Module):
    """conv -> instance norm -> (leaky) ReLU."""

    def __init__(self, in_channels, out_channels, rng, kernel=3, stride=1, slope=0.0):
        self.conv = Conv3d(in_channels, out_channels, kernel, rng, stride=stride)
        self.norm = InstanceNorm3d(out_channels)
        self.slope = slope

    def forward(self, x):
        x = self.norm(self.conv(x))
        return F.leaky_relu(x, self.slope) if self.slope else F.relu(x)


class ResidualBlock(Module):
    """conv3 (stride s) -> IN -> ReLU -> conv3 -> IN, plus shortcut, then ReLU.

    The shortcut is a 1x1x1 projection (with IN) whenever stride or width changes.
    """

    def __init__(self, in_channels, out_channels, rng, stride=2):
        self.conv1 = ConvNormAct(in_channels, out_channels, rng, stride=stride)
        self.conv2 = Conv3d(out_channels, out_channels, 3, rng)
        self.norm2 = InstanceNorm3d(out_channels)
        if stride != 1 or in_channels != out_channels:
            self.proj = Conv3d(in_channels, out_channels, 1, rng, stride=stride, padding=0)
            self.proj_norm = InstanceNorm3d(out_channels)
        else:
            self.proj = None

    def forward(self, x):
        out = self.norm2(self.conv2(self.conv1(x)))
        shortcut = x if self.proj is None else self.proj_norm(self.proj(x))
        return F.relu(out + shortcut)
