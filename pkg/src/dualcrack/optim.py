"""Adam optimiser over a module's parameters."""

from __future__ import annotations

import numpy as np

from .autodiff.nn import Parameter


class Adam:
    def __init__(self, params: list[Parameter], lr: float = 1e-4, betas=(0.5, 0.999),
                 eps: float = 1e-8) -> None:
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.t += 1
        if self.lr == 0:
            return
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad.astype(p.dtype, copy=False)
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            update = (self.lr / c1) * m / (np.sqrt(v / c2) + self.eps)
            p.data -= update.astype(p.dtype, copy=False)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
