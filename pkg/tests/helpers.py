"""Finite-difference gradient checking shared by the test modules."""

import numpy as np

from ctnas.core.tensor import Tensor


def numeric_grad(fn, arrays, index, h=1e-6):
    """Central differences of scalar ``fn(*arrays)`` w.r.t. ``arrays[index]``."""
    x = arrays[index]
    grad = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = fn(*arrays)
        flat[i] = old - h
        down = fn(*arrays)
        flat[i] = old
        grad.reshape(-1)[i] = (up - down) / (2 * h)
    return grad


def rel_error(analytic, numeric):
    """Largest absolute deviation relative to the largest analytic magnitude."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    return float(np.max(np.abs(analytic - numeric)) / (np.max(np.abs(analytic)) + 1e-8))


def check_op(op, arrays, rng, h=1e-6, wrt=None):
    """Max relative error of every input gradient of ``sum(op(*inputs) * R)`` in float64."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    probe = {}

    def scalar(*arrs):
        out = op(*[Tensor(a) for a in arrs]).data
        if "r" not in probe:
            probe["r"] = rng.standard_normal(out.shape)
        return float(np.sum(out * probe["r"]))

    scalar(*arrays)
    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = op(*tensors)
    (out * Tensor(probe["r"])).sum().backward()
    worst = 0.0
    for i in (range(len(arrays)) if wrt is None else wrt):
        num = numeric_grad(scalar, arrays, i, h)
        worst = max(worst, rel_error(tensors[i].grad, num))
    return worst
