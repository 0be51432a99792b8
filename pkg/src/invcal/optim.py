"""Adam-style first-order optimizer on flat weight vectors."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class AdamHyper:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.learning_rate <= 0.0:
            raise ValueError("learning_rate must be > 0")
        if not 0.0 <= self.beta1 < 1.0 or not 0.0 <= self.beta2 < 1.0:
            raise ValueError("beta coefficients must lie in [0, 1)")


@dataclass
class AdamState:
    step: int
    m: np.ndarray
    v: np.ndarray

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(step=0, m=np.zeros(n), v=np.zeros(n))


def adam_step(weights: np.ndarray, grads: np.ndarray, state: AdamState,
              hyper: AdamHyper) -> tuple[np.ndarray, AdamState]:
    """One bias-corrected Adam update; purely functional and deterministic."""
    if weights.shape != grads.shape or weights.shape != state.m.shape:
        raise ValueError("weights, gradients, and state must share one shape")
    t = state.step + 1
    m = hyper.beta1 * state.m + (1.0 - hyper.beta1) * grads
    v = hyper.beta2 * state.v + (1.0 - hyper.beta2) * (grads * grads)
    m_hat = m / (1.0 - hyper.beta1 ** t)
    v_hat = v / (1.0 - hyper.beta2 ** t)
    new_weights = weights - hyper.learning_rate * m_hat / (np.sqrt(v_hat) + hyper.eps)
    return new_weights, AdamState(step=t, m=m, v=v)
