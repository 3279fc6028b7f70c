"""Parameter updates and the warmup-plus-cosine learning-rate schedule."""

from __future__ import annotations

import math
from typing import Iterable, Mapping

import numpy as np

from .errors import TrainingError
from .tensor import Tensor

__all__ = ["AdamW", "SGD", "lr_at", "scaled_lr"]


def _named(params) -> dict[str, Tensor]:
    if isinstance(params, Mapping):
        items = params.items()
    else:
        items = params
    out: dict[str, Tensor] = {}
    for name, p in items:
        if not isinstance(p, Tensor) or not p.requires_grad:
            raise ValueError(f"optimizer parameter {name!r} must be a requires_grad tensor")
        out[str(name)] = p
    if not out:
        raise ValueError("optimizer needs at least one parameter")
    return out


def _checked_grad(name: str, p: Tensor) -> np.ndarray | None:
    """Gradient to apply, or None for parameters off the loss path."""
    g = p.grad
    if g is None:
        return None
    if not np.all(np.isfinite(g)):
        raise TrainingError(f"non-finite gradient for parameter {name!r}")
    return g


class AdamW:
    """Adam with decoupled weight decay.

    Decay scales the parameter by (1 - lr * weight_decay) before the
    moment-based step, so it never enters the moment estimates.
    """

    def __init__(
        self,
        params,
        lr: float = 1e-3,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.0,
    ):
        self.params = _named(params)
        if lr < 0 or eps <= 0 or weight_decay < 0:
            raise ValueError("lr and weight_decay must be >= 0, eps > 0")
        b1, b2 = betas
        if not (0.0 <= b1 < 1.0 and 0.0 <= b2 < 1.0):
            raise ValueError(f"betas must lie in [0, 1), got {betas}")
        self.lr = float(lr)
        self.beta1 = float(b1)
        self.beta2 = float(b2)
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.step_count = 0
        self._m = {n: np.zeros_like(p.data) for n, p in self.params.items()}
        self._v = {n: np.zeros_like(p.data) for n, p in self.params.items()}

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else float(lr)
        if lr < 0:
            raise ValueError(f"negative learning rate {lr}")
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        for name, p in self.params.items():
            g = _checked_grad(name, p)
            if g is None:
                continue
            m = self._m[name]
            v = self._v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            step = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data = p.data * (1.0 - lr * self.weight_decay) - lr * step

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()


class SGD:
    """Stochastic gradient descent with classical momentum."""

    def __init__(
        self,
        params,
        lr: float = 1e-2,
        momentum: float = 0.0,
        weight_decay: float = 0.0,
    ):
        self.params = _named(params)
        if lr < 0 or weight_decay < 0:
            raise ValueError("lr and weight_decay must be >= 0")
        if not 0.0 <= momentum < 1.0:
            raise ValueError(f"momentum must lie in [0, 1), got {momentum}")
        self.lr = float(lr)
        self.momentum = float(momentum)
        self.weight_decay = float(weight_decay)
        self.step_count = 0
        self._vel = {n: np.zeros_like(p.data) for n, p in self.params.items()}

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else float(lr)
        if lr < 0:
            raise ValueError(f"negative learning rate {lr}")
        self.step_count += 1
        for name, p in self.params.items():
            g = _checked_grad(name, p)
            if g is None:
                continue
            vel = self._vel[name]
            vel *= self.momentum
            vel += g
            p.data = p.data * (1.0 - lr * self.weight_decay) - lr * vel

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()


def lr_at(step: int, total_steps: int, warmup_steps: int, base_lr: float) -> float:
    """Learning rate at a step: linear ramp 0 -> base_lr over the warmup,
    then half-cosine decay from base_lr to 0 at total_steps."""
    if total_steps <= 0:
        raise ValueError(f"total_steps must be positive, got {total_steps}")
    if not 0 <= warmup_steps < total_steps:
        raise ValueError(f"warmup_steps must lie in [0, total_steps), got {warmup_steps}")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if base_lr < 0:
        raise ValueError(f"base_lr must be >= 0, got {base_lr}")
    if step < warmup_steps:
        return base_lr * step / warmup_steps
    progress = (step - warmup_steps) / (total_steps - warmup_steps)
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * progress))


def scaled_lr(base_lr: float, batch_size: int, reference_batch: int = 256) -> float:
    """Linear scaling rule: the effective rate grows with the batch size."""
    if batch_size <= 0 or reference_batch <= 0:
        raise ValueError("batch sizes must be positive")
    return base_lr * batch_size / reference_batch
