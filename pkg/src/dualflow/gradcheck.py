"""Finite-difference gradient checking.

The numeric side re-evaluates the forward closure with perturbed parameter
entries (central differences), so it shares no code with the analytic
backward rules it is used to check.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tape, Tensor, reset_grads


def finite_difference_grads(f, params, eps: float = 1e-6) -> list[np.ndarray]:
    """Central-difference gradients of the scalar ``f()`` w.r.t. each
    parameter entry. ``f`` must rebuild its forward pass on every call and
    may return a Tensor or a float."""

    def value() -> float:
        out = f()
        return out.item() if isinstance(out, Tensor) else float(out)

    grads = []
    for p in params:
        g = np.zeros_like(p.data, dtype=np.float64)
        flat = p.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = value()
            flat[i] = orig - eps
            lo = value()
            flat[i] = orig
            gflat[i] = (hi - lo) / (2.0 * eps)
        grads.append(g)
    return grads


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0), 1e-12)
    return float(np.abs(a - n).max(initial=0.0) / scale)


def check_gradients(f, params, eps: float = 1e-6) -> float:
    """Worst relative error between tape gradients and central differences,
    taken over all entries of all ``params``."""
    reset_grads(params)
    with Tape() as tape:
        loss = f()
        tape.backward(loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    numeric = finite_difference_grads(f, params, eps=eps)
    worst = 0.0
    for a, n in zip(analytic, numeric):
        worst = max(worst, max_rel_error(a, n))
    reset_grads(params)
    return worst
