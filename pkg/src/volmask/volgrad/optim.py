from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .tensor import DEFAULT_DTYPE, Tensor


def he_init(shape, fan_in: int, negative_slope: float, rng: np.random.Generator, dtype=DEFAULT_DTYPE) -> Tensor:
    """Uniform He/Kaiming initialization for leaky-ReLU networks.

    Samples U(-b, b) with b = sqrt(6 / ((1 + slope**2) * fan_in)), giving
    variance 2 / ((1 + slope**2) * fan_in).
    """
    if fan_in <= 0:
        raise ValueError(f"fan_in must be positive, got {fan_in}")
    bound = math.sqrt(6.0 / ((1.0 + negative_slope**2) * fan_in))
    return Tensor(rng.uniform(-bound, bound, size=tuple(shape)), dtype=dtype)


def sgd_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], learning_rate: float, weight_decay: float = 0.0):
    """In-place ``p <- p - lr * (g + weight_decay * p)``; returns ``params``."""
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        step = g + weight_decay * p.data if weight_decay else g
        p.data -= (learning_rate * step).astype(p.dtype, copy=False)
    return params
