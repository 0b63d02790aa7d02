"""SGD, gradient clipping and the cosine learning-rate schedule."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional

import numpy as np

from .errors import ConfigError, ContractError
from .tensor import Parameter

_LOGGER = logging.getLogger(__name__)


@dataclass
class LrSchedule:
    """Per-step cosine annealing from ``lr_max`` down to ``lr_min``.

    The first ``warmup_steps`` steps ramp linearly up to ``lr_max``; the cosine
    then runs over the remaining steps.
    """

    lr_max: float
    total_steps: int
    lr_min: float = 0.0
    warmup_steps: int = 0

    def __post_init__(self) -> None:
        if self.total_steps < 1:
            raise ConfigError(f"total_steps must be >= 1, got {self.total_steps}")
        if self.lr_max < self.lr_min:
            raise ConfigError("lr_max must be >= lr_min")
        if not 0 <= self.warmup_steps < self.total_steps:
            raise ConfigError(
                f"warmup_steps must be in [0, {self.total_steps}), got {self.warmup_steps}"
            )

    def __call__(self, step: int) -> float:
        if step < self.warmup_steps:
            return self.lr_max * (max(step, 0) + 1) / (self.warmup_steps + 1)
        span = self.total_steps - self.warmup_steps
        t = min(step - self.warmup_steps, span)
        cos = 1.0 + math.cos(math.pi * t / span)
        return self.lr_min + 0.5 * (self.lr_max - self.lr_min) * cos


class SGD:
    """Stochastic gradient descent with optional momentum.

    Momentum follows the common buffer convention ``buf = m*buf + g`` with the
    first step using the raw gradient. Frozen parameters are skipped.
    """

    def __init__(self, params: Iterable[Parameter], *, momentum: float = 0.0):
        self.params: List[Parameter] = list(params)
        self.momentum = float(momentum)
        self._buffers: Dict[int, np.ndarray] = {}

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, lr: float) -> None:
        for p in self.params:
            if p.frozen:
                continue
            if p.grad is None:
                raise ContractError(f"no gradient for trainable parameter '{p.name}'")
        for p in self.params:
            if p.frozen:
                continue
            d = p.grad
            if self.momentum:
                buf = self._buffers.get(id(p))
                buf = d.copy() if buf is None else self.momentum * buf + d
                self._buffers[id(p)] = buf
                d = buf
            p.data = (p.data - lr * d).astype(p.data.dtype, copy=False)
        self.zero_grad()


def sgd_step(params: Iterable[Parameter], lr: float) -> None:
    """Plain update ``p <- p - lr*grad`` for non-frozen params, then clear grads."""
    SGD(params).step(lr)


def clip_grad_norm(params: Iterable[Parameter], max_norm: Optional[float]) -> float:
    """Scale trainable gradients so their global L2 norm is <= max_norm.

    Returns the norm before clipping.
    """
    params = list(params)
    grads = [p.grad for p in params if not p.frozen and p.grad is not None]
    if not grads:
        return 0.0
    total = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads))
    if max_norm is not None and max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-6)
        for p in params:
            if not p.frozen and p.grad is not None:
                p.grad = p.grad * scale
    return total
