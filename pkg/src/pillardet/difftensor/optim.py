"""Adam with decoupled weight decay, plus the cosine learning-rate schedule."""

from __future__ import annotations

import math

import numpy as np

from .nn import Parameter


def cosine_lr(step: int, total_steps: int, lr_max: float, lr_min: float = 0.0) -> float:
    """Cosine annealing from lr_max (step 0) to lr_min (step == total_steps)."""
    if total_steps <= 0:
        raise ValueError("total_steps must be positive")
    if step < 0 or step > total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if lr_min > lr_max:
        raise ValueError("lr_min must not exceed lr_max")
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * step / total_steps))


class Adam:
    """Adam update with weight decay applied directly to the weights.

    The decay term is not part of the gradient moments: after the Adam step,
    each parameter is shrunk by lr * weight_decay * value.
    """

    def __init__(self, params: list[Parameter], lr: float = 3e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 1e-2):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {p.name: np.zeros_like(p.data) for p in self.params}
        self.v = {p.name: np.zeros_like(p.data) for p in self.params}

    def step(self, lr: float | None = None) -> None:
        if lr is None:
            lr = self.lr
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1**self.t
        bc2 = 1.0 - b2**self.t
        for p in self.params:
            if p.grad is None:
                raise ValueError(f"missing gradient for parameter {p.name}")
            g = p.grad
            m = self.m[p.name]
            v = self.v[p.name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data = p.data - lr * update - lr * self.weight_decay * p.data

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def state_arrays(self) -> list[tuple[str, np.ndarray]]:
        """Flatten optimizer state to named arrays for checkpointing."""
        out: list[tuple[str, np.ndarray]] = [("adam.t", np.array([float(self.t)]))]
        for p in self.params:
            out.append((f"adam.m.{p.name}", self.m[p.name]))
            out.append((f"adam.v.{p.name}", self.v[p.name]))
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        self.t = int(arrays["adam.t"][0])
        for p in self.params:
            self.m[p.name] = np.array(arrays[f"adam.m.{p.name}"]).reshape(p.data.shape)
            self.v[p.name] = np.array(arrays[f"adam.v.{p.name}"]).reshape(p.data.shape)
