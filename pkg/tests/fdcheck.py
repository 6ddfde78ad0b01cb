"""Central finite-difference gradient checks shared by the test modules."""

import numpy as np


def numeric_grad(f, arrays, which, h=1e-6):
    """Central-difference gradient of scalar ``f(arrays)`` w.r.t. ``arrays[which]``."""
    base = arrays[which]
    g = np.zeros_like(base)
    it = np.nditer(base, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        plus = [a.copy() for a in arrays]
        minus = [a.copy() for a in arrays]
        plus[which][idx] += h
        minus[which][idx] -= h
        g[idx] = (f(plus) - f(minus)) / (2 * h)
    return g


def relative_error(analytic, numeric):
    """Norm-based relative error, robust to coordinates whose gradient is ~0."""
    num = np.linalg.norm(analytic - numeric)
    den = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-8)
    return float(num / den)


def max_relative_error(f, arrays, analytic_grads, h=1e-6):
    return max(
        relative_error(g, numeric_grad(f, arrays, i, h)) for i, g in enumerate(analytic_grads)
    )
