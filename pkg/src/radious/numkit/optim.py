from __future__ import annotations

import numpy as np

from .tensor import Tensor


class SGD:
    """Stochastic gradient descent, optionally with heavy-ball momentum."""

    def __init__(self, params: list[Tensor], lr: float = 1e-2, momentum: float = 0.0, weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self._velocity = [np.zeros_like(p.data) for p in self.params] if momentum else None

    def step(self, grads: list[np.ndarray]) -> None:
        for i, (p, g) in enumerate(zip(self.params, grads)):
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            if self._velocity is not None:
                v = self._velocity[i]
                v *= self.momentum
                v += g
                g = v
            p.data = p.data - self.lr * g
