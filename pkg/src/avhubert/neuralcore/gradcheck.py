"""Central finite-difference gradient checks (run under f64)."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .tensor import Tensor


def numeric_grad(loss_fn: Callable[[], Tensor], param: Tensor, h: float = 1e-5) -> np.ndarray:
    """d loss / d param by central differences, perturbing ``param.data`` in place."""
    g = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = float(loss_fn().data)
        flat[i] = old - h
        fm = float(loss_fn().data)
        flat[i] = old
        gf[i] = (fp - fm) / (2 * h)
    return g


def rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Max elementwise |a - n| / max(|a|, |n|, floor).

    ``floor`` keeps entries whose true gradient is ~0 from dividing rounding
    noise by nothing.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))


def check_gradients(loss_fn: Callable[[], Tensor], params: dict[str, Tensor], h: float = 1e-5,
                    floor: float = 1e-6) -> dict[str, float]:
    """Relative error per named parameter between backprop and finite differences."""
    for p in params.values():
        p.grad = None
    loss_fn().backward()
    analytic = {k: (np.zeros_like(p.data) if p.grad is None else p.grad.copy())
                for k, p in params.items()}
    return {k: rel_error(analytic[k], numeric_grad(loss_fn, p, h), floor) for k, p in params.items()}
