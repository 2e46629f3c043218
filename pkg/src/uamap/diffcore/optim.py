"""Adaptive-moment SGD and the cosine learning-rate schedule."""

from __future__ import annotations

import math
from typing import List, Sequence

import numpy as np

from ..validation import NumericalError
from .array import DiffArray


class Adam:
    """Adaptive-moment estimation over a fixed parameter list.

    ``lr`` is read at every step, so a schedule can reassign it between
    steps.  State tensors are allocated lazily to match parameter shapes.
    """

    def __init__(self, params: Sequence[DiffArray], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params: List[DiffArray] = list(params)
        self.lr = float(lr)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m = [np.zeros_like(p.values) for p in self.params]
        self._v = [np.zeros_like(p.values) for p in self.params]

    def step(self) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self._m, self._v):
            g = p.grad
            if not np.all(np.isfinite(g)):
                raise NumericalError("non-finite gradient in optimizer step")
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.values = p.values - self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


def clip_grad_norm(params: Sequence[DiffArray], max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most ``max_norm``.

    Returns the pre-clip norm.  ``max_norm <= 0`` disables clipping.
    """
    total = math.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params:
            g = p.grad
            g *= scale
    return total


def cosine_lr(base_lr: float, step: int, total_steps: int,
              min_lr_frac: float = 0.01) -> float:
    """Cosine decay from ``base_lr`` down to ``min_lr_frac * base_lr``."""
    if total_steps <= 1:
        return base_lr
    frac = min(max(step / (total_steps - 1), 0.0), 1.0)
    lo = base_lr * min_lr_frac
    return lo + 0.5 * (base_lr - lo) * (1.0 + math.cos(math.pi * frac))
