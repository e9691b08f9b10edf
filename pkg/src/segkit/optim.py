"""Adam with bias-corrected moment estimates."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .errors import DimensionError, StateError
from .tensor import Tensor


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    def copy(self) -> "AdamState":
        return AdamState(
            {k: a.copy() for k, a in self.m.items()},
            {k: a.copy() for k, a in self.v.items()},
            self.t,
            self.lr,
            self.beta1,
            self.beta2,
            self.epsilon,
        )


def adam_init(parameters: Mapping[str, Tensor], lr=1e-3, beta1=0.9, beta2=0.999, epsilon=1e-8) -> AdamState:
    m = {name: np.zeros_like(p.data) for name, p in parameters.items()}
    v = {name: np.zeros_like(p.data) for name, p in parameters.items()}
    return AdamState(m, v, 0, lr, beta1, beta2, epsilon)


def adam_step(state: AdamState, gradients: Mapping[str, np.ndarray], parameters: Mapping[str, Tensor]) -> AdamState:
    """One Adam update, applied to ``parameters`` in place.

    m <- b1 m + (1 - b1) g;  v <- b2 v + (1 - b2) g^2
    theta <- theta - lr * m_hat / (sqrt(v_hat) + eps)
    """
    for name, p in parameters.items():
        if name not in gradients:
            raise StateError(f"no gradient for parameter {name!r}")
        if name not in state.m:
            raise StateError(f"optimizer state has no moments for parameter {name!r}")
        if np.shape(gradients[name]) != p.shape:
            raise DimensionError(
                f"gradient for {name!r} has shape {list(np.shape(gradients[name]))}, parameter {list(p.shape)}"
            )
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name, p in parameters.items():
        dt = p.data.dtype
        g = np.asarray(gradients[name], dtype=dt)
        m = state.m[name]
        v = state.v[name]
        m *= dt.type(b1)
        m += dt.type(1.0 - b1) * g
        v *= dt.type(b2)
        v += dt.type(1.0 - b2) * (g * g)
        m_hat = m / dt.type(c1)
        v_hat = v / dt.type(c2)
        p.data -= dt.type(state.lr) * m_hat / (np.sqrt(v_hat) + dt.type(state.epsilon))
    return state
