from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import CnnModel


class NonFiniteGradient(FloatingPointError):
    pass


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict, repr=False)
    v: dict[str, np.ndarray] = field(default_factory=dict, repr=False)

    @classmethod
    def for_model(cls, model: CnnModel, lr: float = 1e-4, **hyper) -> "AdamState":
        state = cls(lr=lr, **hyper)
        state.m = {k: np.zeros_like(p) for k, p in model.params.items()}
        state.v = {k: np.zeros_like(p) for k, p in model.params.items()}
        return state


def adam_step(model: CnnModel, grads: dict[str, np.ndarray], state: AdamState):
    """One bias-corrected Adam update, applied in place. Returns (model, state)."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient for {name} at step {state.step + 1}")
    if not state.m:
        state.m = {k: np.zeros_like(p) for k, p in model.params.items()}
        state.v = {k: np.zeros_like(p) for k, p in model.params.items()}
    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    for name, p in model.params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match {name} {p.shape}")
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= (state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)).astype(p.dtype)
    return model, state
