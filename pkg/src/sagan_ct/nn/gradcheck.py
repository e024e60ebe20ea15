"""Central finite-difference checks for the autodiff engine."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor


def numeric_grad(fn, arrays, index, eps=1e-6):
    """d fn / d arrays[index] by central differences; ``fn`` maps arrays to a scalar."""
    base = arrays[index]
    grad = np.zeros_like(base)
    it = np.nditer(base, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = base[i]
        base[i] = orig + eps
        hi = fn(arrays)
        base[i] = orig - eps
        lo = fn(arrays)
        base[i] = orig
        grad[i] = (hi - lo) / (2 * eps)
    return grad


def max_rel_error(analytic, numeric, floor=1e-8):
    """Largest elementwise error scaled by the gradient's overall magnitude."""
    scale = max(np.abs(analytic).max(), np.abs(numeric).max(), floor)
    return float(np.abs(analytic - numeric).max() / scale)


def check_gradients(op, arrays, eps=1e-6, seed=0):
    """Compare autodiff and finite-difference gradients of ``sum(op(*tensors) * r)``.

    ``r`` is a fixed random projection so that every output element matters.
    Returns the largest relative error over all inputs. Inputs must be float64.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    out_shape = op(*[Tensor(a) for a in arrays]).shape
    r = np.random.default_rng(seed).standard_normal(out_shape)

    def scalar(arrs):
        return float((op(*[Tensor(a) for a in arrs]).data * r).sum())

    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = op(*tensors)
    (out * Tensor(r)).sum().backward()
    worst = 0.0
    for i, t in enumerate(tensors):
        num = numeric_grad(scalar, arrays, i, eps)
        ana = t.grad if t.grad is not None else np.zeros_like(num)
        worst = max(worst, max_rel_error(ana, num))
    return worst
