"""Central finite-difference verification of analytic gradients.

The checker is the independent oracle for the autodiff engine: it re-evaluates
a scalar-valued function with +-h perturbations per input entry and compares
against the gradients produced by backward(). Run in double precision for
tight tolerances.
"""

import numpy as np

from . import tensor as T


def numerical_grad(fn, tensors, index, h=1e-5):
    """d fn / d tensors[index] by central differences.

    fn maps the tensor list to a scalar Tensor and must be a pure function
    of the tensors' data.
    """
    target = tensors[index]
    base = target.data
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        with T.no_grad():
            hi = fn(tensors).item()
        flat[i] = orig - h
        with T.no_grad():
            lo = fn(tensors).item()
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * h)
    return grad


def max_rel_error(analytic, numeric, floor=1e-6):
    """Max relative error with an absolute floor for near-zero entries."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def check_gradients(fn, tensors, h=1e-5, floor=1e-6):
    """Run fn forward+backward, FD-check every requires_grad input.

    Returns the max relative error across all checked inputs.
    """
    for t in tensors:
        t.zero_grad()
    loss = fn(tensors)
    T.backward(loss)
    worst = 0.0
    for i, t in enumerate(tensors):
        if not t.requires_grad:
            continue
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        numeric = numerical_grad(fn, tensors, i, h=h)
        worst = max(worst, max_rel_error(analytic, numeric, floor=floor))
    return worst
