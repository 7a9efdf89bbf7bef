from __future__ import annotations

from typing import Sequence

import numpy as np

from ..errors import MissingGradient
from .tensor import Tensor


def sgd_step(
    params: Sequence[Tensor],
    lr: float,
    momentum: float = 0.0,
    weight_decay: float = 0.0,
    buffers: list[np.ndarray | None] | None = None,
) -> list[np.ndarray]:
    """One SGD update with heavy-ball momentum and L2 weight decay.

    v <- momentum * v + grad + weight_decay * param;  param <- param - lr * v.
    ``buffers`` holds the velocities from the previous call (None on the first
    step) and the updated list is returned. Gradients are cleared afterwards.
    """
    if buffers is None:
        buffers = [None] * len(params)
    missing = [i for i, p in enumerate(params) if p.grad is None]
    if missing:
        raise MissingGradient(f"parameters without gradient at positions {missing}")
    out = []
    for p, v in zip(params, buffers):
        d = p.grad + weight_decay * p.data if weight_decay else p.grad
        v = d.copy() if v is None else momentum * v + d
        p.data = p.data - lr * v
        p.grad = None
        out.append(v)
    return out


def clip_grad_norm(params: Sequence[Tensor], max_norm: float) -> float:
    """Rescale all gradients in place so their joint L2 norm is at most ``max_norm``.

    Returns the norm before clipping. Parameters without a gradient are skipped.
    """
    grads = [p.grad for p in params if p.grad is not None]
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))
    if norm > max_norm:
        scale = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


class SGD:
    """Stateful wrapper around :func:`sgd_step` that owns the momentum buffers."""

    def __init__(self, params: Sequence[Tensor], lr: float, momentum: float = 0.0, weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.buffers: list[np.ndarray | None] = [None] * len(self.params)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        self.buffers = sgd_step(self.params, self.lr, self.momentum, self.weight_decay, self.buffers)
