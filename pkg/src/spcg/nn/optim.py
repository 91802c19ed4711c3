from __future__ import annotations

import math

import numpy as np

from .layers import Param


class Adam:
    """Adam with bias correction.  Moments are created lazily, zero-initialised."""

    def __init__(self, params: list[Param], lr: float = 8e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]

    def step(self, lr: float | None = None):
        lr = self.lr if lr is None else lr
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.value -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def adam_step(params: list[np.ndarray], grads: list[np.ndarray], state: dict, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> list[np.ndarray]:
    """Functional Adam update; ``state`` holds ``t``, ``m`` and ``v`` and is updated in place."""
    if not state:
        state.update(t=0, m=[np.zeros_like(p) for p in params], v=[np.zeros_like(p) for p in params])
    state["t"] += 1
    t = state["t"]
    out = []
    for p, g, m, v in zip(params, grads, state["m"], state["v"]):
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        mhat = m / (1 - beta1 ** t)
        vhat = v / (1 - beta2 ** t)
        out.append(p - lr * mhat / (np.sqrt(vhat) + eps))
    return out


def cosine_lr(step: int, total: int, lr_start: float = 8e-4, lr_end: float = 2e-5) -> float:
    if total <= 1:
        return lr_start
    frac = min(max(step / (total - 1), 0.0), 1.0)
    return lr_end + 0.5 * (lr_start - lr_end) * (1.0 + math.cos(math.pi * frac))
