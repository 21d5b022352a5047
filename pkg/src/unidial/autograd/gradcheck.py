"""Central finite-difference verification of analytic gradients."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward


def numerical_grad(fn: Callable[..., Tensor], inputs: Sequence[Tensor], eps: float = 1e-5) -> list[np.ndarray]:
    grads = []
    for x in inputs:
        g = np.zeros_like(x.data)
        flat = x.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = fn(*inputs).item()
            flat[i] = orig - eps
            down = fn(*inputs).item()
            flat[i] = orig
            gflat[i] = (up - down) / (2.0 * eps)
        grads.append(g)
    return grads


def analytic_grad(fn: Callable[..., Tensor], inputs: Sequence[Tensor]) -> list[np.ndarray]:
    for x in inputs:
        x.grad = None
        x.requires_grad = True
    backward(fn(*inputs))
    return [x.grad.copy() if x.grad is not None else np.zeros_like(x.data) for x in inputs]


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-10) -> float:
    """Norm-wise relative error ``|a-b| / max(|a|, |b|, floor)``."""
    num = float(np.linalg.norm(a - b))
    den = max(float(np.linalg.norm(a)), float(np.linalg.norm(b)), floor)
    return num / den


def gradcheck(fn: Callable[..., Tensor], inputs: Sequence[Tensor], eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients over ``inputs``.

    Inputs must be float64; ``fn`` must return a scalar tensor and be
    deterministic (disable dropout).
    """
    for x in inputs:
        if x.dtype != np.float64:
            raise TypeError("gradcheck needs float64 inputs")
    ana = analytic_grad(fn, inputs)
    num = numerical_grad(fn, inputs, eps)
    return max(relative_error(a, n) for a, n in zip(ana, num))
