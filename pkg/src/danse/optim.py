"""Plain SGD and RMSprop updates over named parameter collections."""

from __future__ import annotations

import numpy as np

from danse.autodiff import Tensor


class DivergenceError(RuntimeError):
    """Training hit a non-finite loss or gradient."""


def _checked_grad(name: str, p: Tensor) -> np.ndarray | None:
    if p.grad is None:
        return None
    if not np.all(np.isfinite(p.grad)):
        raise DivergenceError(f"non-finite gradient for parameter {name!r}")
    return p.grad


class SGD:
    def __init__(self, params: dict[str, Tensor], lr: float):
        self.params = dict(params)
        self.lr = lr

    def step(self) -> None:
        for name, p in self.params.items():
            g = _checked_grad(name, p)
            if g is None:
                continue
            p.data -= self.lr * g

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()


class RMSprop:
    """theta <- theta - lr * g / (sqrt(v) + eps), v an EMA of g squared."""

    def __init__(self, params: dict[str, Tensor], lr: float, rho: float = 0.9, eps: float = 1e-8):
        self.params = dict(params)
        self.lr = lr
        self.rho = rho
        self.eps = eps
        self.v = {name: np.zeros_like(p.data) for name, p in self.params.items()}

    def step(self) -> None:
        for name, p in self.params.items():
            g = _checked_grad(name, p)
            if g is None:
                continue
            v = self.v[name]
            v *= self.rho
            v += (1.0 - self.rho) * g * g
            p.data -= self.lr * g / (np.sqrt(v) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()
