"""Central finite-difference oracle shared by the gradient tests."""

from __future__ import annotations

import numpy as np


def central_diff(f, arrays, h=1e-5):
    """Numeric gradient of scalar ``f(*arrays)`` w.r.t. each array.

    Perturbs entries in place and restores them; ``f`` must not retain
    references to the arrays across calls.
    """
    grads = []
    for arr in arrays:
        grad = np.zeros_like(arr)
        flat = arr.ravel()
        gflat = grad.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = f(*arrays)
            flat[i] = orig - h
            f_minus = f(*arrays)
            flat[i] = orig
            gflat[i] = (f_plus - f_minus) / (2.0 * h)
        grads.append(grad)
    return grads


def max_rel_err(analytic, numeric, floor=1e-3):
    """Worst-case relative error with an absolute floor for tiny gradients."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if a.shape != n.shape:
        raise AssertionError(f"gradient shape mismatch: {a.shape} vs {n.shape}")
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))
