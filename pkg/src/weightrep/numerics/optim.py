"""First-order optimizers over lists of trainable tensors."""
from dataclasses import dataclass, field

import numpy as np

from .tensor import NonFiniteError


def _assign(p, value):
    if not np.isfinite(value).all():
        raise NonFiniteError("optimizer step produced non-finite parameters")
    p.data = value.astype(p.data.dtype, copy=False)


def zero_grad(params):
    for p in params:
        p.grad = None


@dataclass
class OptimizerState:
    kind: str = "adam"
    lr: float = 5e-3
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    step_count: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


class Adam:
    """Adam with bias correction. Parameters are updated by rebinding ``p.data``."""

    def __init__(self, params, lr=5e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.state = OptimizerState(
            "adam", lr, tuple(betas), eps, 0,
            [np.zeros_like(p.data) for p in self.params],
            [np.zeros_like(p.data) for p in self.params],
        )

    def step(self):
        s = self.state
        b1, b2 = s.betas
        s.step_count += 1
        c1 = 1.0 - b1 ** s.step_count
        c2 = 1.0 - b2 ** s.step_count
        for i, p in enumerate(self.params):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if g.shape != p.data.shape:
                raise ValueError(f"gradient shape {g.shape} does not match parameter {p.data.shape}")
            s.m[i] = b1 * s.m[i] + (1 - b1) * g
            s.v[i] = b2 * s.v[i] + (1 - b2) * g * g
            update = s.lr * (s.m[i] / c1) / (np.sqrt(s.v[i] / c2) + s.eps)
            _assign(p, p.data - update)

    def zero_grad(self):
        zero_grad(self.params)


class SGD:
    def __init__(self, params, lr=1e-2, momentum=0.0):
        self.params = list(params)
        self.momentum = momentum
        self.state = OptimizerState("sgd", lr, (momentum, 0.0), 0.0, 0,
                                    [np.zeros_like(p.data) for p in self.params], [])

    def step(self):
        s = self.state
        s.step_count += 1
        for i, p in enumerate(self.params):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if g.shape != p.data.shape:
                raise ValueError(f"gradient shape {g.shape} does not match parameter {p.data.shape}")
            s.m[i] = self.momentum * s.m[i] + g
            _assign(p, p.data - s.lr * s.m[i])

    def zero_grad(self):
        zero_grad(self.params)
