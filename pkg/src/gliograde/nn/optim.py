"""ADAM and SGD-with-momentum, both with coupled L2 weight decay.

Weight decay is added to the raw gradient (``g + wd * theta``) before any
moment or velocity update. The learning rate is constant; no schedule is
applied.
"""

from dataclasses import dataclass

import numpy as np

from ..errors import ConfigError, ContractError

ADAM = "adam"
SGD = "sgd"


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str
    learning_rate: float
    momentum: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.kind not in (ADAM, SGD):
            raise ConfigError(f"optimizer kind must be {ADAM!r} or {SGD!r}, got {self.kind!r}")
        if not self.learning_rate >= 0:
            raise ConfigError(f"learning rate must be non-negative, got {self.learning_rate}")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.epsilon > 0):
            raise ConfigError("ADAM constants out of range")
        if not self.weight_decay >= 0:
            raise ConfigError(f"weight decay must be non-negative, got {self.weight_decay}")

    @classmethod
    def segmentation(cls, **overrides):
        return cls(**{"kind": ADAM, "learning_rate": 1e-4, "weight_decay": 1e-5, **overrides})

    @classmethod
    def classification(cls, **overrides):
        return cls(**{"kind": SGD, "learning_rate": 1e-3, "momentum": 0.9, "weight_decay": 1e-5, **overrides})


def optimizer_step(params, grads, state, config):
    """One update of every array in ``params``; returns ``(new_params, new_state)``.

    ``params`` and ``grads`` map names to arrays. ``state`` holds per-name
    moments (ADAM) or velocities (SGD) plus the step counter ``"t"``.
    """
    missing = [name for name in params if grads.get(name) is None]
    if missing:
        raise ContractError(f"no gradient for trainable parameters {missing[:5]}; run backward() first")
    t = state.get("t", 0) + 1
    new_params, new_state = {}, {"t": t}
    lr, wd = config.learning_rate, config.weight_decay
    for name, theta in params.items():
        g = grads[name]
        if wd:
            g = g + wd * theta
        if config.kind == ADAM:
            m, v = state.get(("m", name)), state.get(("v", name))
            m = (1 - config.beta1) * g if m is None else config.beta1 * m + (1 - config.beta1) * g
            v = (1 - config.beta2) * g * g if v is None else config.beta2 * v + (1 - config.beta2) * g * g
            m_hat = m / (1 - config.beta1**t)
            v_hat = v / (1 - config.beta2**t)
            update = lr * m_hat / (np.sqrt(v_hat) + config.epsilon)
            new_state[("m", name)], new_state[("v", name)] = m, v
        else:
            vel = state.get(("vel", name))
            vel = g if vel is None else config.momentum * vel + g
            update = lr * vel
            new_state[("vel", name)] = vel
        new_params[name] = (theta - update).astype(theta.dtype, copy=False)
    return new_params, new_state


class Optimizer:
    """Applies :func:`optimizer_step` in place to a ``{name: Tensor}`` mapping."""

    def __init__(self, params, config):
        self.params = dict(params)
        self.config = config
        self.state = {}

    def step(self):
        arrays = {name: p.data for name, p in self.params.items()}
        grads = {name: p.grad for name, p in self.params.items()}
        new_params, self.state = optimizer_step(arrays, grads, self.state, self.config)
        for name, p in self.params.items():
            p.data = new_params[name]

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None
