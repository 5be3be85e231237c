"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward, no_grad


def numerical_grad(fn: Callable[[], Tensor], param: Tensor, h: float = 1e-5) -> np.ndarray:
    """d fn() / d param by central differences, perturbing ``param.data`` in place."""
    grad = np.zeros_like(param.data, dtype=np.float64)
    flat = param.data.reshape(-1)
    gflat = grad.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(fn().data.sum())
            flat[i] = orig - h
            fm = float(fn().data.sum())
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max |a - n| / max(|a|, |n|, 1e-8) over the whole array (a global scale is used, not per entry)."""
    num = np.max(np.abs(analytic - numeric)) if analytic.size else 0.0
    den = max(np.max(np.abs(analytic)) if analytic.size else 0.0,
              np.max(np.abs(numeric)) if numeric.size else 0.0, 1e-8)
    return float(num / den)


def check_gradients(fn: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5) -> dict[int, float]:
    """Relative error between backprop and finite differences for each tensor in ``params``.

    ``fn`` must be a pure function of the current parameter values returning a
    scalar. Returns ``{index: rel_err}``.
    """
    for p in params:
        p.grad = None
        p.requires_grad = True
    loss = fn()
    backward(loss)
    errors = {}
    for i, p in enumerate(params):
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        numeric = numerical_grad(fn, p, h)
        errors[i] = relative_error(np.asarray(analytic, dtype=np.float64), numeric)
    return errors
