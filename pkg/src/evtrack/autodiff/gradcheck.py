"""Central finite-difference gradient verification."""
from __future__ import annotations

from typing import Callable, Iterable

import numpy as np

from .tensor import Tensor, backward, no_grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    err = np.abs(analytic - numeric) / np.maximum(1e-8, np.abs(numeric))
    return float(err.max()) if err.size else 0.0


def numeric_gradient(f: Callable[[np.ndarray], float], x: np.ndarray, step: float) -> np.ndarray:
    """(f(x+h) - f(x-h)) / 2h per coordinate; ``x`` is restored afterwards."""
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = f(x)
        flat[i] = orig - step
        lo = f(x)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * step)
    return grad


def grad_check(f: Callable[[Tensor], Tensor], point, step: float = 1e-5) -> float:
    """Max relative error between the tape gradient of ``f`` at ``point`` and central differences."""
    x = np.array(point, dtype=np.float64)
    t = Tensor(x.copy(), requires_grad=True)
    backward(f(t))
    analytic = np.zeros_like(x) if t.grad is None else t.grad

    def value(v: np.ndarray) -> float:
        with no_grad():
            return f(Tensor(v)).item()

    return relative_error(analytic, numeric_gradient(value, x, step))


def grad_check_params(
    loss_fn: Callable[[], Tensor],
    params: dict[str, Tensor] | Iterable[tuple[str, Tensor]],
    step: float = 1e-5,
) -> dict[str, float]:
    """Check every named parameter tensor of a closed-over loss; returns per-name max rel. error.

    ``loss_fn`` must be a pure function of the parameter values (no dropout
    draws, no running-stat dependence).
    """
    items = list(params.items()) if isinstance(params, dict) else list(params)
    for _, p in items:
        p.grad = None
    backward(loss_fn())
    analytic = {name: (np.zeros_like(p.data) if p.grad is None else p.grad.copy()) for name, p in items}

    def value(_: np.ndarray) -> float:
        with no_grad():
            return loss_fn().item()

    return {
        name: relative_error(analytic[name], numeric_gradient(value, p.data, step))
        for name, p in items
    }
