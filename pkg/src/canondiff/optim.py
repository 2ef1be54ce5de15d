"""Adam and parameter EMA, written against plain lists of numpy arrays."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params, **hyper) -> "AdamState":
        return cls(m=[np.zeros_like(p) for p in params], v=[np.zeros_like(p) for p in params], **hyper)


def _check_shapes(a, b, what: str) -> None:
    if len(a) != len(b):
        raise ValueError(f"{what}: got {len(a)} and {len(b)} arrays")
    for x, y in zip(a, b):
        if np.shape(x) != np.shape(y):
            raise ValueError(f"{what}: shape mismatch {np.shape(x)} vs {np.shape(y)}")


def adam_step(state: AdamState, params: list[np.ndarray], grads: list[np.ndarray]):
    """One bias-corrected Adam update. Returns ``(new_params, new_state)``; inputs are not mutated."""
    _check_shapes(params, grads, "adam_step params/grads")
    _check_shapes(params, state.m, "adam_step params/state")
    if state.step < 0:
        raise ValueError("Adam step counter must be >= 0")
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    new_m, new_v, new_p = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        new_p.append(p - state.lr * m_hat / (np.sqrt(v_hat) + state.eps))
        new_m.append(m)
        new_v.append(v)
    new_state = AdamState(m=new_m, v=new_v, step=t, lr=state.lr, beta1=b1, beta2=b2, eps=state.eps)
    return new_p, new_state


@dataclass
class EmaState:
    decay: float
    shadow: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if not 0.0 < self.decay < 1.0:
            raise ValueError(f"EMA decay must lie in (0, 1), got {self.decay}")

    @classmethod
    def from_params(cls, params, decay: float) -> "EmaState":
        return cls(decay=decay, shadow=[np.array(p, copy=True) for p in params])


def ema_update(state: EmaState, params: list[np.ndarray]) -> EmaState:
    """shadow <- decay * shadow + (1 - decay) * params, elementwise."""
    _check_shapes(state.shadow, params, "ema_update")
    d = state.decay
    return EmaState(decay=d, shadow=[s + (1.0 - d) * (p - s) for s, p in zip(state.shadow, params)])
