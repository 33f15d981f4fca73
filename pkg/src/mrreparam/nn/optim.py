from __future__ import annotations

from typing import Iterable

import numpy as np

from .tensor import Parameter

ADAM_LR = 2e-4
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


def adam_step(params: Iterable[Parameter], lr: float = ADAM_LR, beta1: float = ADAM_BETA1,
              beta2: float = ADAM_BETA2, eps: float = ADAM_EPS) -> None:
    """One bias-corrected Adam update, in place, on trainable parameters.

    Frozen parameters are skipped entirely: their value, moments and step
    count stay untouched.
    """
    for p in params:
        if not p.trainable:
            continue
        p.step_count += 1
        t = p.step_count
        g = p.grad
        p.adam_m = beta1 * p.adam_m + (1.0 - beta1) * g
        p.adam_v = beta2 * p.adam_v + (1.0 - beta2) * (g * g)
        m_hat = p.adam_m / (1.0 - beta1 ** t)
        v_hat = p.adam_v / (1.0 - beta2 ** t)
        update = lr * m_hat / (np.sqrt(v_hat) + eps)
        p.data = (p.data - update).astype(p.data.dtype, copy=False)


class Adam:
    def __init__(self, params: Iterable[Parameter], lr: float = ADAM_LR,
                 betas: tuple[float, float] = (ADAM_BETA1, ADAM_BETA2), eps: float = ADAM_EPS):
        if lr <= 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        adam_step(self.params, self.lr, self.beta1, self.beta2, self.eps)
