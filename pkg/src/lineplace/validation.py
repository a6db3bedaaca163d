"""Input validation helpers shared across the package."""

from __future__ import annotations

import numpy as np


def check_array(x, name: str, shape=None, ndim=None, dtype=None, finite: bool = False):
    """Coerce to ndarray and validate shape/ndim/dtype; raise ValueError on mismatch.

    ``shape`` entries of None match any size.
    """
    arr = np.asarray(x)
    if dtype is not None:
        arr = arr.astype(dtype, copy=False)
    if ndim is not None and arr.ndim != ndim:
        raise ValueError(f"{name}: expected {ndim} dimensions, got {arr.ndim}")
    if shape is not None:
        if arr.ndim != len(shape):
            raise ValueError(f"{name}: expected shape {shape}, got {arr.shape}")
        for want, got in zip(shape, arr.shape):
            if want is not None and want != got:
                raise ValueError(f"{name}: expected shape {shape}, got {arr.shape}")
    if finite and not np.isfinite(arr).all():
        raise ValueError(f"{name}: contains non-finite values")
    return arr


def check_unit_vector(v, name: str, tol: float = 1e-6):
    v = check_array(v, name, shape=(3,), dtype=np.float64, finite=True)
    n = np.linalg.norm(v)
    if abs(n - 1.0) > tol:
        raise ValueError(f"{name}: expected a unit vector, norm is {n:.6g}")
    return v


def check_positive(value, name: str):
    if not value > 0:
        raise ValueError(f"{name}: must be positive, got {value}")
    return value
