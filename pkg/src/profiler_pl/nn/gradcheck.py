"""Central finite-difference gradients, used to validate backpropagation.

Only the forward pass is used here, so the check stays independent of the
analytic backward code.
"""

from __future__ import annotations

import numpy as np

from .model import CnnModel, forward


def mse_of(model: CnnModel, channels, scalars, targets) -> float:
    pred, _ = forward(model, channels, scalars)
    diff = pred.astype(np.float64) - np.asarray(targets, dtype=np.float64)
    return float(np.mean(diff * diff))


def numerical_grads(model: CnnModel, channels, scalars, targets, h: float = 1e-3,
                    names=None) -> dict[str, np.ndarray]:
    """d(MSE)/d(param) by central differences, element by element."""
    out = {}
    for name in names or model.params:
        p = model.params[name]
        g = np.zeros(p.shape, dtype=np.float64)
        flat = p.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = mse_of(model, channels, scalars, targets)
            flat[i] = orig - h
            down = mse_of(model, channels, scalars, targets)
            flat[i] = orig
            g.reshape(-1)[i] = (up - down) / (2 * h)
        out[name] = g
    return out


def relative_error(analytic, numeric) -> float:
    """``||a - n|| / max(||a||, ||n||)``, 0 when both vanish."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    scale = max(np.linalg.norm(a), np.linalg.norm(n))
    if scale == 0:
        return 0.0
    return float(np.linalg.norm(a - n) / scale)


def kink_margin(cache) -> float:
    """Smallest distance of any ReLU input from 0, or any pool window's winner
    from its runner-up. Finite differences are only trustworthy when a step of
    ``h`` cannot cross one of these kinks."""
    margin = np.inf
    for kind, _, c in cache.steps:
        if kind in ("relu", "relu_fc"):
            margin = min(margin, float(np.abs(c).min()))
        elif kind == "pool":
            parts = np.sort(np.stack(c[1]), axis=0)
            margin = min(margin, float((parts[-1] - parts[-2]).min()))
    return margin
