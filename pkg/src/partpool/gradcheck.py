"""Central finite-difference gradient checks (run in float64)."""
from __future__ import annotations

from typing import Callable

import numpy as np

STEP = 1e-5
RTOL = 1e-4
# denominators below this are treated as this value, so gradients that are
# zero up to rounding are compared absolutely
ATOL = 1e-6


def numerical_gradient(f: Callable[[], float], x: np.ndarray, step: float = STEP) -> np.ndarray:
    """d f / d x by central differences; ``f`` reads ``x`` in place."""
    grad = np.zeros_like(x, dtype=np.float64)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + step
        fp = f()
        x[idx] = orig - step
        fm = f()
        x[idx] = orig
        grad[idx] = (fp - fm) / (2 * step)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, atol: float = ATOL) -> float:
    """Largest elementwise ``|a - n| / max(|a|, |n|, atol)``."""
    a, n = np.asarray(analytic, np.float64), np.asarray(numeric, np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), atol)
    return float((np.abs(a - n) / denom).max()) if a.size else 0.0


def check_layer(layer, x: np.ndarray, rng: np.random.Generator, step: float = STEP,
                forward_kwargs: dict | None = None) -> dict[str, float]:
    """Relative errors of input and parameter gradients of ``layer`` at ``x``.

    The scalar checked is ``sum(forward(x) * R)`` for a fixed random ``R``.
    """
    kwargs = forward_kwargs or {}
    x = x.astype(np.float64)
    layer.astype(np.float64)
    out = layer.forward(x, **kwargs)
    proj = rng.standard_normal(out.shape)

    def loss():
        return float((layer.forward(x, **kwargs) * proj).sum())

    layer.zero_grad()
    layer.forward(x, **kwargs)
    grad_x = layer.backward(proj.copy())
    errors = {"input": relative_error(grad_x, numerical_gradient(loss, x, step))}
    for name, p in layer.named_parameters():
        analytic = p.grad.copy()
        errors[name] = relative_error(analytic, numerical_gradient(loss, p.data, step))
    return errors
