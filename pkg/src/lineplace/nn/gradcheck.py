"""Finite-difference gradient verification utilities (float64 only)."""

from __future__ import annotations

import numpy as np

from .tensor import Tape, Tensor


def numeric_gradient(f, xs: list[np.ndarray], h: float = 1e-5):
    """Central-difference gradients of scalar f() w.r.t. arrays it reads in place."""
    grads = []
    for x in xs:
        g = np.zeros_like(x, dtype=np.float64)
        flat = x.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f()
            flat[i] = orig - h
            fm = f()
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * h)
        grads.append(g)
    return grads


def analytic_gradient(f, params: list[Tensor]):
    """Tape-recorded gradients of the scalar loss f(), which must read ``params``."""
    for p in params:
        p.grad = None
    with Tape() as tape:
        loss = f()
        tape.backward(loss)
    return [np.zeros_like(p.data) if p.grad is None else p.grad for p in params]


def relative_error(analytic, numeric):
    """max |a - n| scaled by the largest gradient magnitude seen."""
    num = 0.0
    den = 0.0
    for a, n in zip(analytic, numeric):
        num = max(num, float(np.abs(a - n).max()) if a.size else 0.0)
        den = max(den, float(np.abs(a).max()) if a.size else 0.0)
        den = max(den, float(np.abs(n).max()) if n.size else 0.0)
    return num / max(den, 1e-12)


def check_gradients(make_loss, params: list[Tensor], h: float = 1e-5):
    """Compare tape gradients of make_loss() against central differences.

    ``make_loss`` is called repeatedly and must be a pure function of the
    parameter values.  All parameters must be float64.  Returns the relative
    error (see relative_error).
    """
    for p in params:
        if p.data.dtype != np.float64:
            raise ValueError("gradient checks require float64 parameters")
    analytic = analytic_gradient(make_loss, params)

    def scalar():
        return float(make_loss().data)

    numeric = numeric_gradient(scalar, [p.data for p in params], h=h)
    return relative_error(analytic, numeric)
