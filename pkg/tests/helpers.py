"""Shared numeric test utilities: finite differences and error metrics."""

import numpy as np


def fd_gradient(fn, x, eps=1e-5):
    """Central-difference gradient of scalar fn() w.r.t. array x (in place)."""
    grad = np.zeros_like(x)
    flat = x.ravel()
    gflat = grad.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = fn()
        flat[i] = orig - eps
        fm = fn()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * eps)
    return grad


def rel_error(analytic, numeric, floor=1e-8):
    """Max absolute deviation normalized by the larger gradient scale."""
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    scale = max(np.abs(analytic).max(initial=0.0),
                np.abs(numeric).max(initial=0.0), floor)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)
