"""Stochastic gradient descent with momentum."""

from __future__ import annotations

import numpy as np

from crossing_attn.tensor import Tensor


class SGD:
    def __init__(self, params: list[Tensor], lr: float, momentum: float = 0.9, weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        for p, v in zip(self.params, self.velocity):
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            v *= self.momentum
            v += g
            p.data -= p.dtype.type(self.lr) * v

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
