"""Adam optimizer and the warmup/step learning-rate schedule."""

from __future__ import annotations

import numpy as np

from .tensor import Parameter


class Adam:
    """Standard bias-corrected Adam over a fixed parameter list.

    After each update, parameters carrying a clamp_min (the attention mask
    scales) are clamped from below so they stay strictly positive.
    """

    def __init__(self, params, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params: list[Parameter] = list(params)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def grad_norm(self) -> float:
        total = 0.0
        for p in self.params:
            g = p.grad
            total += float((g * g).sum())
        return float(np.sqrt(total))

    def step(self, lr: float) -> None:
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.step_count
        c2 = 1.0 - b2**self.step_count
        for p, m, v in zip(self.params, self._m, self._v):
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            update = lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.tensor.data = p.tensor.data - update
            if p.clamp_min is not None:
                p.tensor.data = np.maximum(p.tensor.data, p.clamp_min)


def lr_at(iteration: int, warmup_iters: int, peak_lr: float, decay_iter: int, decayed_lr: float) -> float:
    """Linear ramp 0 -> peak over warmup, flat peak, then a single step decay."""
    if iteration < warmup_iters:
        return peak_lr * iteration / warmup_iters if warmup_iters else peak_lr
    if iteration < decay_iter:
        return peak_lr
    return decayed_lr
