"""First-order optimizers acting in place on parameter nodes."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .autodiff import Node


class Optimizer:
    def __init__(self, params: Sequence[Node]):
        self.params = list(params)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {}


class Adam(Optimizer):
    def __init__(self, params: Sequence[Node], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        super().__init__(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p._grad
            if g is None:
                continue
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.value -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class SGD(Optimizer):
    """Heavy-ball momentum: ``v <- mu*v + g``, ``p <- p - lr*v``."""

    def __init__(self, params: Sequence[Node], lr: float = 0.1, momentum: float = 0.0):
        super().__init__(params)
        self.lr = lr
        self.momentum = momentum
        self.velocity = [np.zeros_like(p.value) for p in self.params]

    def step(self) -> None:
        for p, vel in zip(self.params, self.velocity):
            g = p._grad
            if g is None:
                continue
            if self.momentum:
                vel *= self.momentum
                vel += g
                p.value -= self.lr * vel
            else:
                p.value -= self.lr * g
