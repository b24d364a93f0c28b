"""Stochastic gradient descent with momentum and L2 weight decay."""

from __future__ import annotations

from typing import Iterable

import numpy as np

from .tensor import Parameter


def sgd_step(params: Iterable[Parameter], lr: float, momentum: float = 0.9, weight_decay: float = 0.0) -> None:
    """One update, then clear gradients.

    ``buf <- momentum * buf + grad + weight_decay * param``;
    ``param <- param - lr * buf``.
    """
    for p in params:
        if p.grad is None:
            continue
        d = p.grad
        if weight_decay:
            d = d + weight_decay * p.data
        if momentum:
            p.momentum_buffer *= momentum
            p.momentum_buffer += d
            step = p.momentum_buffer
        else:
            np.copyto(p.momentum_buffer, d)
            step = d
        p.data -= lr * step
        p.grad.fill(0.0)


def zero_grad(params: Iterable[Parameter]) -> None:
    for p in params:
        p.zero_grad()
