"""Optimizers over named Parameters.

Adam is the training default; SGD with momentum is kept behind config for
ablations. Moment buffers are allocated lazily on the first step and keyed
by parameter name.
"""

from __future__ import annotations

import numpy as np

from .engine import Parameter


class MissingGradientError(RuntimeError):
    """A parameter reached the optimizer without a populated gradient."""


class Adam:
    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        if lr <= 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self._moments: dict[str, tuple[np.ndarray, np.ndarray]] = {}

    def step(self, params: list[Parameter]) -> None:
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        for p in params:
            g = p.tensor.grad
            if g is None:
                raise MissingGradientError(f"parameter {p.name!r} has no gradient")
            m, v = self._moments.get(p.name, (None, None))
            if m is None:
                m = np.zeros_like(p.tensor.data)
                v = np.zeros_like(p.tensor.data)
            m = self.beta1 * m + (1.0 - self.beta1) * g
            v = self.beta2 * v + (1.0 - self.beta2) * (g * g)
            self._moments[p.name] = (m, v)
            p.tensor.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


class Sgd:
    def __init__(self, lr: float = 1e-2, momentum: float = 0.9):
        if lr <= 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        self.lr = lr
        self.momentum = momentum
        self.step_count = 0
        self._velocity: dict[str, np.ndarray] = {}

    def step(self, params: list[Parameter]) -> None:
        self.step_count += 1
        for p in params:
            g = p.tensor.grad
            if g is None:
                raise MissingGradientError(f"parameter {p.name!r} has no gradient")
            v = self._velocity.get(p.name)
            v = g.copy() if v is None else self.momentum * v + g
            self._velocity[p.name] = v
            p.tensor.data -= self.lr * v


def optimizer_step(state, params: list[Parameter]) -> None:
    """Apply one update in place; grads are left untouched for the caller."""
    state.step(params)


def make_optimizer(kind: str, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                   eps: float = 1e-8, momentum: float = 0.9):
    if kind == "adam":
        return Adam(lr=lr, beta1=beta1, beta2=beta2, eps=eps)
    if kind == "sgd":
        return Sgd(lr=lr, momentum=momentum)
    raise ValueError(f"unknown optimizer {kind!r}; choose 'adam' or 'sgd'")


def clip_grad_global_norm(params: list[Parameter], max_norm: float) -> float:
    """Scale all grads so their joint L2 norm is at most max_norm."""
    sq = 0.0
    for p in params:
        if p.tensor.grad is not None:
            sq += float((p.tensor.grad**2).sum())
    norm = sq**0.5
    if norm > max_norm and norm > 0.0:
        factor = max_norm / norm
        for p in params:
            if p.tensor.grad is not None:
                p.tensor.grad *= factor
    return norm
