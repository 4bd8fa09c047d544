"""Central finite-difference check of recorded gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from mipl_cdl.numerics.tensor import Parameter, Tensor


def numerical_gradient(fn: Callable[[], Tensor], param: Parameter, step: float = 1e-5) -> np.ndarray:
    grad = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        f_plus = fn().item()
        flat[i] = orig - step
        f_minus = fn().item()
        flat[i] = orig
        out[i] = (f_plus - f_minus) / (2.0 * step)
    return grad


def gradient_check(fn: Callable[[], Tensor], params: Sequence[Parameter], step: float = 1e-5) -> float:
    """Max relative error between backward() and central differences.

    ``fn`` must rebuild the scalar expression from the current parameter
    values on every call.  The per-entry error is
    ``|analytic - central| / max(|analytic|, |central|, 1e-8)``.
    """
    if not 0 < step <= 1e-3:
        raise ValueError(f"step must lie in (0, 1e-3], got {step}")
    for p in params:
        p.zero_grad()
    fn().backward()
    worst = 0.0
    for p in params:
        analytic = p.grad.copy()
        central = numerical_gradient(fn, p, step)
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(central)), 1e-8)
        err = np.abs(analytic - central) / denom
        if err.size:
            worst = max(worst, float(err.max()))
        p.zero_grad()
    return worst
