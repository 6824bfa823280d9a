"""Box constraints used by the perturbation optimizers."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, as_tensor

__all__ = ["project_linf", "clip_range"]


def project_linf(t, epsilon: float) -> Tensor:
    """Project onto the L-infinity ball of radius ``epsilon``."""
    if epsilon < 0:
        raise ValueError(f"epsilon must be non-negative, got {epsilon}")
    return clip_range(t, -epsilon, epsilon)


def clip_range(t, lo: float, hi: float) -> Tensor:
    if lo > hi:
        raise ValueError(f"clip_range: lo={lo} exceeds hi={hi}")
    t = as_tensor(t)
    dt = t.data.dtype.type
    return Tensor(np.clip(t.data, dt(lo), dt(hi)))
