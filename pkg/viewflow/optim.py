"""ADAM with a step-decayed learning rate."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from pydantic import BaseModel, ConfigDict

from .errors import ConfigurationError, NonFiniteError
from .layers import Tensor
from .network import NetworkGrads, NetworkParams


class AdamSettings(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    learning_rate: float = 1e-4
    step_size: int = 50_000
    gamma: float = 0.5
    # when set, step_size becomes this fraction of the training budget
    step_fraction: float | None = None

    def resolved_step_size(self, iterations: int) -> int:
        if self.step_fraction is None:
            return self.step_size
        return max(1, round(self.step_fraction * iterations))


@dataclass
class AdamState:
    settings: AdamSettings
    step_size: int
    m: dict[str, Tensor] = field(default_factory=dict)
    v: dict[str, Tensor] = field(default_factory=dict)
    t: int = 0

    @classmethod
    def for_params(
        cls, params: NetworkParams, settings: AdamSettings, step_size: int | None = None
    ) -> AdamState:
        m = {name: np.zeros_like(tensor) for name, tensor in params.tensors()}
        v = {name: np.zeros_like(tensor) for name, tensor in params.tensors()}
        return cls(settings, step_size or settings.step_size, m, v, 0)


def learning_rate(state: AdamState) -> float:
    settings = state.settings
    return settings.learning_rate * settings.gamma ** (state.t // state.step_size)


def adam_step(
    params: NetworkParams, grads: NetworkGrads, state: AdamState
) -> tuple[NetworkParams, AdamState]:
    """Update ``params`` and ``state`` in place and return both.

    Parameters and moments are rounded to the float32 grid after the update
    so that single-precision checkpoints restore training exactly. If any
    updated value is not finite on that grid, :class:`NonFiniteError` is
    raised and neither ``params`` nor ``state`` is modified.
    """
    settings = state.settings
    lr = learning_rate(state)
    t = state.t + 1
    correction1 = 1.0 - settings.beta1**t
    correction2 = 1.0 - settings.beta2**t
    staged: list[tuple[Tensor, Tensor, Tensor, Tensor, Tensor, Tensor]] = []
    for name, layer in params.layers.items():
        if name not in grads:
            raise ConfigurationError(f"missing gradient for layer {name}")
        for suffix, tensor, grad in (
            ("weight", layer.weight, grads[name][0]),
            ("bias", layer.bias, grads[name][1]),
        ):
            key = f"{name}.{suffix}"
            if grad.shape != tensor.shape:
                raise ConfigurationError(f"{key}: gradient {grad.shape} != {tensor.shape}")
            m = _single(settings.beta1 * state.m[key] + (1.0 - settings.beta1) * grad)
            v = _single(settings.beta2 * state.v[key] + (1.0 - settings.beta2) * grad * grad)
            updated = _single(
                tensor - lr * (m / correction1) / (np.sqrt(v / correction2) + settings.eps)
            )
            for value in (m, v, updated):
                if not np.isfinite(value).all():
                    raise NonFiniteError(f"ADAM update of {key} left the float32 range")
            staged.append((state.m[key], m, state.v[key], v, tensor, updated))
    for m_slot, m, v_slot, v, tensor, updated in staged:
        m_slot[...] = m
        v_slot[...] = v
        tensor[...] = updated
    state.t = t
    return params, state


def _single(tensor: Tensor) -> Tensor:
    """Nearest float32 value of every entry, as float64."""
    with np.errstate(over="ignore"):
        return tensor.astype(np.float32).astype(np.float64)
