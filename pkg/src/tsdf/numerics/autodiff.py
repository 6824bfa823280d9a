"""Value-and-gradient evaluation and the finite-difference oracle."""

from __future__ import annotations

from typing import Callable, Mapping, Sequence

import numpy as np

from .tensor import NonFiniteError, ShapeError, Tensor

__all__ = ["evaluate_with_gradients", "finite_difference_gradient"]


def evaluate_with_gradients(fn: Callable[..., Tensor], wrt: Sequence | Mapping):
    """Evaluate ``fn`` and differentiate its scalar result.

    Parameters
    ----------
    fn : callable
        Builds the expression.  Called as ``fn(*leaves)`` when ``wrt`` is a
        sequence and ``fn(**leaves)`` when it is a mapping.
    wrt : sequence or mapping of array_like
        Leaf values.  Each becomes a fresh gradient-tracking :class:`Tensor`.

    Returns
    -------
    value : Tensor
        The forward result (detached).
    grads : list or dict of ndarray
        Gradients shaped like their leaves, in the container type of ``wrt``.
    """
    if isinstance(wrt, Mapping):
        leaves = {k: Tensor(getattr(v, "data", v), requires_grad=True) for k, v in wrt.items()}
        out = fn(**leaves)
        items = list(leaves.values())
    else:
        leaves = [Tensor(getattr(v, "data", v), requires_grad=True) for v in wrt]
        out = fn(*leaves)
        items = leaves
    if out.size != 1:
        raise ShapeError("evaluate_with_gradients", out.shape, (), detail="expression must be scalar")
    out.backward()
    grads = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in items]
    if isinstance(wrt, Mapping):
        grads = dict(zip(leaves.keys(), grads))
    return out.detach(), grads


def finite_difference_gradient(f: Callable[[np.ndarray], float], point, step: float = 1e-3) -> np.ndarray:
    """Central-difference gradient of a scalar function, evaluated in float64.

    ``f`` receives a float64 array shaped like ``point`` and must return a
    scalar.  Each coordinate costs two evaluations.
    """
    if not step > 0:
        raise ValueError(f"step must be positive, got {step}")
    x = np.array(getattr(point, "data", point), dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = float(f(x))
        flat[i] = orig - step
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteError("finite_difference_gradient", i)
        gflat[i] = (fp - fm) / (2 * step)
    return grad
