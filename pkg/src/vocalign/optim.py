"""AdamW and the warmup learning-rate schedule."""
from __future__ import annotations

from typing import Mapping, Sequence

import numpy as np

from .numerics import Tensor


class AdamW:
    """Adam with decoupled weight decay (Loshchilov & Hutter)."""

    def __init__(self, params: Sequence[Tensor], betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.params = list(params)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = [np.zeros(p.shape) for p in self.params]
        self.v = [np.zeros(p.shape) for p in self.params]
        self.steps = 0

    def step(self, grads: Mapping[Tensor, np.ndarray], lr: float) -> None:
        """One update; parameters missing from ``grads`` get a zero gradient."""
        self.steps += 1
        bc1 = 1.0 - self.beta1 ** self.steps
        bc2 = 1.0 - self.beta2 ** self.steps
        for i, p in enumerate(self.params):
            g = grads.get(p)
            if g is None:
                g = np.zeros(p.shape)
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g
            update = (self.m[i] / bc1) / (np.sqrt(self.v[i] / bc2) + self.eps)
            data = p.data
            if self.weight_decay:
                data = data * (1.0 - lr * self.weight_decay)
            # fresh array: values handed out earlier stay untouched
            p.data = data - lr * update


def warmup_lr(step: int, base_lr: float, start_lr: float, warmup_steps: int) -> float:
    """Linear ramp from ``start_lr`` to ``base_lr`` over ``warmup_steps``, then constant."""
    if warmup_steps <= 0 or step >= warmup_steps:
        return base_lr
    return start_lr + (base_lr - start_lr) * step / warmup_steps
