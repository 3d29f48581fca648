"""Reconstruction and foreground losses, each returning ``(loss, grad)``."""

from __future__ import annotations

import numpy as np
from scipy.special import expit

from .errors import ConfigurationError, DataError, UsageError
from .layers import Tensor


def l1_loss(
    prediction: Tensor, target: Tensor, weight_mask: Tensor | None = None
) -> tuple[float, Tensor]:
    """Mean absolute error over the (masked) elements.

    ``weight_mask`` may have a single channel; it is broadcast over the
    channels of ``prediction``. The subgradient at a zero residual is 0.
    """
    if prediction.shape != target.shape:
        raise ConfigurationError(f"prediction {prediction.shape} != target {target.shape}")
    residual = prediction - target
    if weight_mask is None:
        weights = np.ones_like(residual)
    else:
        try:
            weights = np.broadcast_to(weight_mask, residual.shape).astype(np.float64)
        except ValueError as exc:
            raise ConfigurationError(
                f"mask {weight_mask.shape} does not broadcast to {residual.shape}"
            ) from exc
    count = weights.sum()
    if count == 0:
        raise UsageError("l1_loss over an empty mask")
    loss = float((np.abs(residual) * weights).sum() / count)
    grad = np.sign(residual) * weights / count
    return loss, grad


def cross_entropy_loss(logits: Tensor, labels: Tensor) -> tuple[float, Tensor]:
    """Mean binary cross-entropy of ``sigmoid(logits)`` against ``{0, 1}`` labels."""
    if logits.shape != labels.shape:
        raise ConfigurationError(f"logits {logits.shape} != labels {labels.shape}")
    if not np.isin(labels, (0.0, 1.0)).all():
        raise DataError("cross_entropy_loss labels must be 0 or 1")
    # -[y log s(z) + (1 - y) log(1 - s(z))] == log(1 + e^z) - y z
    per_element = np.logaddexp(0.0, logits) - labels * logits
    count = logits.size
    return float(per_element.sum() / count), (expit(logits) - labels) / count
