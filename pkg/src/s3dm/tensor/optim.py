"""AdamW with decoupled weight decay."""

from __future__ import annotations

import numpy as np

from .core import Tensor


class AdamW:
    """Decoupled weight decay Adam over a fixed list of parameters.

    Moment tensors mirror the parameter shapes; the step counter advances
    by exactly one per update.
    """

    def __init__(self, params, lr: float = 5e-3, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.0):
        self.params: list[Tensor] = list(params)
        self.lr = float(lr)
        self.beta1, self.beta2 = float(betas[0]), float(betas[1])
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, grads: dict[Tensor, np.ndarray]) -> None:
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.step_count
        bc2 = 1.0 - b2 ** self.step_count
        for i, p in enumerate(self.params):
            g = grads.get(p)
            if g is None:
                g = np.zeros_like(p.data)
            if g.shape != p.data.shape:
                raise ValueError(
                    f"gradient shape {g.shape} != parameter shape {p.data.shape}"
                    f" for {p.name or 'parameter'}")
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(
                    f"non-finite gradient for {p.name or 'parameter'}")
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * (g * g)
            m_hat = self.m[i] / bc1
            v_hat = self.v[i] / bc2
            p.data = p.data - self.lr * (m_hat / (np.sqrt(v_hat) + self.eps)
                                         + self.weight_decay * p.data)


def adamw_step(params, grads, state: AdamW) -> AdamW:
    """Single update through an AdamW state; params are modified in place."""
    if list(params) != state.params:
        raise ValueError("params do not match the optimizer state")
    state.step(grads)
    return state
