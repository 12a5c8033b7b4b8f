"""Minimal optimizers over dicts of numpy arrays."""

from __future__ import annotations

import numpy as np


class DivergenceError(FloatingPointError):
    pass


def check_finite(loss: float, grads: dict[str, np.ndarray], where: str = "") -> None:
    if not np.isfinite(loss):
        raise DivergenceError(f"non-finite loss {loss} {where}".strip())
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient in {k} {where}".strip())


def grad_norm(grads: dict[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


class SGD:
    def __init__(self, lr: float, momentum: float = 0.0):
        self.lr = lr
        self.momentum = momentum
        self._v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        out = {}
        for k, p in params.items():
            g = grads.get(k)
            if g is None:
                out[k] = p
                continue
            if self.momentum:
                v = self._v.get(k)
                v = g.copy() if v is None else self.momentum * v + g
                self._v[k] = v
                g = v
            out[k] = p - self.lr * g
        return out


class Adam:
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self._t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        self._t += 1
        b1, b2 = self.beta1, self.beta2
        out = {}
        for k, p in params.items():
            g = grads.get(k)
            if g is None:
                out[k] = p
                continue
            m = b1 * self._m.get(k, 0.0) + (1 - b1) * g
            v = b2 * self._v.get(k, 0.0) + (1 - b2) * g * g
            self._m[k], self._v[k] = m, v
            mhat = m / (1 - b1**self._t)
            vhat = v / (1 - b2**self._t)
            out[k] = p - self.lr * mhat / (np.sqrt(vhat) + self.eps)
        return out


def make_optimizer(name: str, lr: float, momentum: float = 0.0):
    if name == "sgd":
        return SGD(lr, momentum)
    if name == "adam":
        return Adam(lr)
    raise ValueError(f"unknown optimizer {name!r}")
