"""Adam optimizer on flat parameter vectors."""

from dataclasses import dataclass

import numpy as np

from .errors import ContractError


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, n, **kwargs):
        return cls(np.zeros(n), np.zeros(n), **kwargs)


def adam_step(params, grads, state, lr):
    """One bias-corrected Adam update; returns (new params, new state)."""
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if params.shape != grads.shape or state.m.shape != params.shape:
        raise ContractError(
            f"Adam length mismatch: params {params.shape}, grads {grads.shape}, state {state.m.shape}"
        )
    t = state.t + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grads
    v = state.beta2 * state.v + (1.0 - state.beta2) * grads * grads
    m_hat = m / (1.0 - state.beta1**t)
    v_hat = v / (1.0 - state.beta2**t)
    new = params - lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return new, AdamState(m, v, t, state.beta1, state.beta2, state.eps)


@dataclass
class HalvingSchedule:
    """Learning rate halved every ``every`` steps (``every=0`` keeps it constant)."""

    base_rate: float
    every: int = 0

    def __call__(self, s):
        if self.every <= 0:
            return self.base_rate
        return self.base_rate * 0.5 ** (s // self.every)
