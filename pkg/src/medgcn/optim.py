"""Adam optimizer over tape-autodiff parameter tensors."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor
from .errors import ParameterError, StateError


@dataclass
class AdamState:
    """Per-parameter first/second moment accumulators."""

    m: np.ndarray
    v: np.ndarray


@dataclass
class Adam:
    """Bias-corrected Adam.

    step() consumes the accumulated .grad of every parameter and zeroes it,
    so each optimization step must be preceded by exactly one backward pass
    (or several, if gradient accumulation is intended).
    """

    params: list[Tensor]
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = field(default=0, init=False)
    state: list[AdamState] = field(default_factory=list, init=False)

    def __post_init__(self):
        if self.lr <= 0.0:
            raise ParameterError(f"learning rate must be positive, got {self.lr}")
        if not 0.0 <= self.beta1 < 1.0 or not 0.0 <= self.beta2 < 1.0:
            raise ParameterError("betas must lie in [0, 1)")
        if not self.params:
            raise ParameterError("optimizer needs at least one parameter")
        for p in self.params:
            if not p.requires_grad:
                raise ParameterError("all optimized tensors must require gradients")
            self.state.append(AdamState(np.zeros_like(p.values), np.zeros_like(p.values)))

    def step(self) -> None:
        for i, p in enumerate(self.params):
            if p.grad is None:
                raise StateError(f"parameter {i} has no gradient; run backward before step")
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for p, s in zip(self.params, self.state):
            g = p.grad
            s.m = self.beta1 * s.m + (1.0 - self.beta1) * g
            s.v = self.beta2 * s.v + (1.0 - self.beta2) * (g * g)
            m_hat = s.m / bc1
            v_hat = s.v / bc2
            p.values -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
            p.grad = None

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
