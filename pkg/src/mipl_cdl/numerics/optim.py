"""Momentum SGD with L2 weight decay and a per-epoch cosine schedule."""

from __future__ import annotations

import math
from typing import Iterable

import numpy as np

from mipl_cdl.errors import ConfigurationError, NumericalError
from mipl_cdl.numerics.tensor import Parameter


def sgd_step(params: Iterable[Parameter], lr: float, momentum: float = 0.9,
             weight_decay: float = 0.0001) -> None:
    """One momentum-SGD update, then reset gradients.

    The decay term is added to the gradient (classic coupled L2) and the
    velocity follows ``v <- momentum * v + g``; the update is ``theta -= lr * v``.
    """
    if not lr > 0:
        raise ConfigurationError(f"learning rate must be positive, got {lr}")
    params = list(params)
    for p in params:
        if not np.all(np.isfinite(p.grad)):
            raise NumericalError(f"non-finite gradient on parameter '{p.name}'", op="sgd_step")
    for p in params:
        g = p.grad
        if weight_decay:
            g = g + weight_decay * p.data
        if momentum:
            p.velocity = momentum * p.velocity + g
            step = p.velocity
        else:
            step = g
        p.data = p.data - lr * step
        p.zero_grad()


def cosine_anneal(lr0: float, epoch: int, total: int) -> float:
    """Half-cosine decay from ``lr0`` at epoch 1 towards 0 after ``total`` epochs."""
    if total <= 0:
        raise ConfigurationError(f"total epochs must be >= 1, got {total}")
    if not 1 <= epoch <= total:
        raise ConfigurationError(f"epoch {epoch} outside 1..{total}")
    return 0.5 * lr0 * (1.0 + math.cos(math.pi * (epoch - 1) / total))
