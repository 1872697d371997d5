"""Adam and the inverse-square-root warmup schedule."""

from dataclasses import dataclass, field
from typing import Dict, Mapping

import numpy as np


class OptimError(ValueError):
    pass


def lr_at(step: int, warmup_steps: int, d_model: int, lr_scale: float = 1.0) -> float:
    """``lr_scale * d_model^-0.5 * min(step^-0.5, step * warmup^-1.5)``."""
    if step < 1:
        raise OptimError(f"step must be >= 1, got {step}")
    return lr_scale * d_model ** -0.5 * min(step ** -0.5, step * warmup_steps ** -1.5)


@dataclass
class AdamState:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], state: AdamState,
              lr: float, beta1: float = 0.9, beta2: float = 0.98, eps: float = 1e-9):
    """One bias-corrected Adam update.

    Only keys present in ``grads`` are updated; every gradient key must be a
    parameter. Returns new ``(params, state)``; inputs are not modified.
    """
    unknown = set(grads) - set(params)
    if unknown:
        raise OptimError(f"gradients for unknown parameters: {sorted(unknown)}")
    t = state.step + 1
    new_params = dict(params)
    m, v = dict(state.m), dict(state.v)
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for k, g in grads.items():
        p = params[k]
        if g.shape != p.shape:
            raise OptimError(f"gradient shape {g.shape} != parameter shape {p.shape} for {k}")
        mk = beta1 * m.get(k, np.zeros_like(p)) + (1.0 - beta1) * g
        vk = beta2 * v.get(k, np.zeros_like(p)) + (1.0 - beta2) * g * g
        m[k], v[k] = mk, vk
        new_params[k] = p - lr * (mk / c1) / (np.sqrt(vk / c2) + eps)
    return new_params, AdamState(m, v, t)
