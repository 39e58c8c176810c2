"""Server-side Adam state and update step for the master factor matrices.

This variant keeps exponentially decaying averages of gradients and squared
gradients and bias-corrects them with the constant denominators (1 - beta1)
and (1 - beta2) rather than the step-dependent (1 - beta^t) of textbook
Adam. The server holds one independent state per factor matrix.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class AdamConfig:
    beta1: float
    beta2: float
    gamma: float
    epsilon: float

    def __post_init__(self):
        if not 0.0 < self.beta1 < 1.0:
            raise ValueError(f"beta1 must be in (0, 1), got {self.beta1}")
        if not 0.0 < self.beta2 < 1.0:
            raise ValueError(f"beta2 must be in (0, 1), got {self.beta2}")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError(f"gamma must be in (0, 1), got {self.gamma}")
        if self.epsilon <= 0.0:
            raise ValueError(f"epsilon must be > 0, got {self.epsilon}")


@dataclass(eq=False)
class AdamState:
    """Decaying gradient averages for one target matrix, zero-initialized."""

    m: np.ndarray
    v: np.ndarray
    step_count: int = 0

    @classmethod
    def zeros(cls, shape) -> "AdamState":
        return cls(m=np.zeros(shape), v=np.zeros(shape))


def adam_step(target, grad, state: AdamState, cfg: AdamConfig):
    """One Adam update; returns (new_target, state) with state mutated.

    m <- beta1 m + (1 - beta1) g
    v <- beta2 v + (1 - beta2) g^2
    target <- target - gamma * (m / (1 - beta1)) / (sqrt(v / (1 - beta2)) + eps)
    """
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != target.shape or state.m.shape != target.shape:
        raise ValueError(
            f"shape mismatch: target {target.shape}, grad {grad.shape}, state {state.m.shape}"
        )
    state.m = cfg.beta1 * state.m + (1.0 - cfg.beta1) * grad
    state.v = cfg.beta2 * state.v + (1.0 - cfg.beta2) * grad * grad
    state.step_count += 1
    m_hat = state.m / (1.0 - cfg.beta1)
    v_hat = state.v / (1.0 - cfg.beta2)
    return target - cfg.gamma * m_hat / (np.sqrt(v_hat) + cfg.epsilon), state
