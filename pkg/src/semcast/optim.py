"""Gradient-step rules applied to named parameter stores.

Plain SGD is the reference update (it matches the ascent rule the training
schedule assumes, with no moment confounds); Adam is available as an opt-in
for the supervised pre-training phase.
"""

from __future__ import annotations

from typing import Mapping

import numpy as np

from .autodiff import Array, Tensor

_DIRECTIONS = ("ascent", "descent")


class Sgd:
    """Plain stochastic gradient step: p <- p + lr * g (ascent) or - (descent)."""

    def __init__(self, lr: float, direction: str = "descent"):
        if lr <= 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        if direction not in _DIRECTIONS:
            raise ValueError(f"direction must be one of {_DIRECTIONS}, got {direction!r}")
        self.lr = lr
        self.direction = direction
        self.step_count = 0

    def _sign(self, direction: str | None) -> float:
        direction = direction or self.direction
        if direction not in _DIRECTIONS:
            raise ValueError(f"direction must be one of {_DIRECTIONS}, got {direction!r}")
        return 1.0 if direction == "ascent" else -1.0

    def step(self, params: Mapping[str, Tensor], grads: Mapping[str, Array],
             direction: str | None = None) -> None:
        missing = [name for name in params if name not in grads]
        if missing:
            raise ValueError(f"gradients missing for parameters: {sorted(missing)}")
        s = self._sign(direction) * self.lr
        for name, p in params.items():
            p.data += s * grads[name]
        self.step_count += 1


class Adam(Sgd):
    """Adam with bias correction; moment slots are keyed by parameter name."""

    def __init__(self, lr: float, direction: str = "descent",
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        super().__init__(lr, direction)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self._m: dict[str, Array] = {}
        self._v: dict[str, Array] = {}

    def step(self, params: Mapping[str, Tensor], grads: Mapping[str, Array],
             direction: str | None = None) -> None:
        missing = [name for name in params if name not in grads]
        if missing:
            raise ValueError(f"gradients missing for parameters: {sorted(missing)}")
        sign = self._sign(direction)
        self.step_count += 1
        t = self.step_count
        for name, p in params.items():
            g = grads[name]
            m = self._m.get(name)
            v = self._v.get(name)
            if m is None:
                m = np.zeros_like(p.data)
                v = np.zeros_like(p.data)
            m = self.beta1 * m + (1 - self.beta1) * g
            v = self.beta2 * v + (1 - self.beta2) * g * g
            self._m[name], self._v[name] = m, v
            m_hat = m / (1 - self.beta1 ** t)
            v_hat = v / (1 - self.beta2 ** t)
            p.data += sign * self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def make_optimizer(kind: str, lr: float, direction: str = "descent") -> Sgd:
    if kind == "sgd":
        return Sgd(lr, direction)
    if kind == "adam":
        return Adam(lr, direction)
    raise ValueError(f"unknown optimizer {kind!r}; expected 'sgd' or 'adam'")
