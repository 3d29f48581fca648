"""Central finite differences for checking hand-written backward passes."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .layers import Tensor

FD_STEP = 1e-5


def numeric_grad_at(
    loss: Callable[[], float], tensor: Tensor, index: tuple[int, ...], step: float = FD_STEP
) -> float:
    """``d loss / d tensor[index]`` by central differences, perturbing ``tensor`` in place."""
    original = tensor[index]
    tensor[index] = original + step
    plus = loss()
    tensor[index] = original - step
    minus = loss()
    tensor[index] = original
    return (plus - minus) / (2.0 * step)


def numeric_grad(loss: Callable[[], float], tensor: Tensor, step: float = FD_STEP) -> Tensor:
    grad = np.zeros_like(tensor)
    for index in np.ndindex(tensor.shape):
        grad[index] = numeric_grad_at(loss, tensor, index, step)
    return grad


def relative_error(analytic: Tensor | float, numeric: Tensor | float, floor: float = 1e-8) -> float:
    """Largest ``|a - n| / max(|a|, |n|, floor)`` over all entries."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    scale = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float((np.abs(a - n) / scale).max())
