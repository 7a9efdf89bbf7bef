"""Central finite-difference gradient checking."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward


def numeric_grad(fn: Callable[..., Tensor], arrays: Sequence[np.ndarray], h: float = 1e-5) -> list[np.ndarray]:
    """d fn / d arrays[i] by central differences; ``fn`` takes Tensors and returns a scalar."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    grads = []
    for i, a in enumerate(arrays):
        g = np.zeros_like(a)
        flat, gflat = a.reshape(-1), g.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            up = fn(*[Tensor(x) for x in arrays]).item()
            flat[j] = orig - h
            down = fn(*[Tensor(x) for x in arrays]).item()
            flat[j] = orig
            gflat[j] = (up - down) / (2 * h)
        grads.append(g)
    return grads


def analytic_grad(fn: Callable[..., Tensor], arrays: Sequence[np.ndarray]) -> list[np.ndarray]:
    leaves = [Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in arrays]
    backward(fn(*leaves))
    return [np.zeros_like(t.data) if t.grad is None else t.grad for t in leaves]


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-10) -> float:
    """||a - b|| / max(||a||, ||b||, floor)."""
    a, b = np.ravel(a), np.ravel(b)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), floor))


def gradcheck(fn: Callable[..., Tensor], arrays: Sequence[np.ndarray], h: float = 1e-5) -> float:
    """Largest relative error between analytic and numeric gradients over all inputs."""
    ana = analytic_grad(fn, arrays)
    num = numeric_grad(fn, arrays, h)
    return max(relative_error(x, y) for x, y in zip(ana, num))
