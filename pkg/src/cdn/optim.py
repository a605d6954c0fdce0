"""Adam with L2 weight decay, and the step learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import Param


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


class Adam:
    """Bias-corrected Adam.

    Weight decay is classic L2 (``grad += wd * param`` before the moments)
    unless ``decoupled`` is set, in which case params shrink by ``lr * wd``
    directly as in AdamW.
    """

    def __init__(self, named_params, lr: float = 2e-4, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 1e-4, decoupled: bool = False):
        self.params: dict[str, Param] = dict(named_params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.decoupled = decoupled
        self.state = AdamState(
            m={k: np.zeros_like(p.data) for k, p in self.params.items()},
            v={k: np.zeros_like(p.data) for k, p in self.params.items()},
        )

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        st = self.state
        st.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1 - b1 ** st.t
        bc2 = 1 - b2 ** st.t
        dt = np.float32
        for name, p in self.params.items():
            if p.grad is None:
                raise ValueError(f"parameter {name} has no gradient")
            dt = p.dtype.type
            g = p.grad
            if self.weight_decay and not self.decoupled:
                g = g + dt(self.weight_decay) * p.data
            m, v = st.m[name], st.v[name]
            m *= dt(b1)
            m += dt(1 - b1) * g
            v *= dt(b2)
            v += dt(1 - b2) * (g * g)
            update = (m / dt(bc1)) / (np.sqrt(v / dt(bc2)) + dt(self.eps))
            if self.weight_decay and self.decoupled:
                p.data -= dt(lr * self.weight_decay) * p.data
            p.data -= dt(lr) * update


def adam_reference(p: float, grads: list[float], lr: float, wd: float = 0.0, betas=(0.9, 0.999),
                   eps: float = 1e-8) -> list[float]:
    """Scalar float64 Adam trajectory, used as an oracle in tests."""
    m = v = 0.0
    out = []
    for t, g in enumerate(grads, start=1):
        g = g + wd * p
        m = betas[0] * m + (1 - betas[0]) * g
        v = betas[1] * v + (1 - betas[1]) * g * g
        mh = m / (1 - betas[0] ** t)
        vh = v / (1 - betas[1] ** t)
        p = p - lr * mh / (math.sqrt(vh) + eps)
        out.append(p)
    return out


def lr_at(epoch: int, lr0: float = 2e-4, factor: float = 0.5, every: int = 30) -> float:
    """Step decay: ``lr0 * factor ** (epoch // every)``."""
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    return lr0 * factor ** (epoch // every)
