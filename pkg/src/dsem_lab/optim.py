from __future__ import annotations

from typing import Iterable

import numpy as np

from dsem_lab.nn import Parameter


def sgd_step(
    params: Iterable[Parameter],
    lr: float,
    momentum: float = 0.9,
    weight_decay: float = 5e-4,
) -> None:
    """One momentum-SGD update, then clear gradients.

    v <- momentum*v + grad + weight_decay*w ;  w <- w - lr*v
    """
    params = list(params)
    for p in params:
        if p.grad is None:
            raise ValueError(f"parameter {p.name or '<unnamed>'} has no gradient")
    for p in params:
        g = p.grad.astype(np.float64)
        w = p.data.astype(np.float64)
        v = momentum * p.momentum_buffer.astype(np.float64) + g + weight_decay * w
        p.momentum_buffer = v.astype(p.dtype)
        p.data = (w - lr * v).astype(p.dtype)
        p.grad = None


def clip_grad_norm(params: Iterable[Parameter], max_norm: float) -> float:
    """Rescale gradients in place so their joint L2 norm is at most ``max_norm``.

    Returns the norm before clipping. Parameters without a gradient are skipped.
    """
    grads = [p for p in params if p.grad is not None]
    norm = float(np.sqrt(sum(float(np.square(p.grad, dtype=np.float64).sum()) for p in grads)))
    if norm > max_norm:
        s = max_norm / norm
        for p in grads:
            p.grad = (p.grad.astype(np.float64) * s).astype(p.grad.dtype)
    return norm
