"""Differentiable bilinear sampling of a source image along an appearance flow.

A flow field stores, for each target pixel ``(u, v)``, an offset ``(dx, dy)``
in source pixels; the target pixel is read from the source at the absolute
coordinate ``(u + dx, v + dy)``. Each of the four integer neighbours ``q`` of
that coordinate contributes ``I[q] * (1 - |x - x_q|) * (1 - |y - y_q|)``.
Neighbours outside the source contribute zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError
from .layers import Tensor, check_finite


@dataclass(frozen=True)
class IdentityGrid:
    """``coords[0][v][u] == u`` and ``coords[1][v][u] == v``."""

    coords: Tensor

    @property
    def height(self) -> int:
        return self.coords.shape[1]

    @property
    def width(self) -> int:
        return self.coords.shape[2]


def identity_grid(height: int, width: int) -> IdentityGrid:
    ys, xs = np.meshgrid(
        np.arange(height, dtype=np.float64), np.arange(width, dtype=np.float64), indexing="ij"
    )
    return IdentityGrid(np.stack([xs, ys]))


def zero_flow(batch: int, height: int, width: int) -> Tensor:
    return np.zeros((batch, 2, height, width))


def absolute_coords(flow: Tensor) -> Tensor:
    grid = identity_grid(flow.shape[2], flow.shape[3])
    return flow + grid.coords[None]


@dataclass(frozen=True)
class _Taps:
    # flat source index, validity and bilinear weight of each of the 4 neighbours
    index: Tensor
    valid: Tensor
    weight: Tensor
    # d(weight)/dx and d(weight)/dy for each neighbour
    dweight_dx: Tensor
    dweight_dy: Tensor


def _check_shapes(source: Tensor, flow: Tensor) -> None:
    if source.ndim != 4:
        raise ConfigurationError(f"source must be (N, C, H, W), got {source.shape}")
    if flow.ndim != 4 or flow.shape[1] != 2:
        raise ConfigurationError(f"flow must be (N, 2, H, W), got {flow.shape}")
    if flow.shape[0] != source.shape[0] or flow.shape[2:] != source.shape[2:]:
        raise ConfigurationError(
            f"flow {flow.shape} does not match source {source.shape} in batch or spatial size"
        )


def _taps(flow: Tensor, height: int, width: int) -> _Taps:
    coords = absolute_coords(flow)
    x, y = coords[:, 0], coords[:, 1]
    x0 = np.floor(x)
    y0 = np.floor(y)
    fx = x - x0
    fy = y - y0
    # subgradient 0 at integer coordinates
    sx = np.where(fx == 0.0, 0.0, 1.0)
    sy = np.where(fy == 0.0, 0.0, 1.0)

    indices, valids, weights, ddx, ddy = [], [], [], [], []
    for oy in (0, 1):
        wy = fy if oy else 1.0 - fy
        dwy = sy if oy else -sy
        qy = y0 + oy
        for ox in (0, 1):
            wx = fx if ox else 1.0 - fx
            dwx = sx if ox else -sx
            qx = x0 + ox
            valid = (qx >= 0) & (qx <= width - 1) & (qy >= 0) & (qy <= height - 1)
            qxi = np.clip(qx, 0, width - 1).astype(np.int64)
            qyi = np.clip(qy, 0, height - 1).astype(np.int64)
            indices.append(qyi * width + qxi)
            valids.append(valid)
            weights.append(np.where(valid, wx * wy, 0.0))
            ddx.append(np.where(valid, dwx * wy, 0.0))
            ddy.append(np.where(valid, wx * dwy, 0.0))
    return _Taps(
        index=np.stack(indices),
        valid=np.stack(valids),
        weight=np.stack(weights),
        dweight_dx=np.stack(ddx),
        dweight_dy=np.stack(ddy),
    )


def _gather(source: Tensor, index: Tensor) -> Tensor:
    # source (N, C, H, W), index (N, H, W) -> (N, C, H, W)
    n, c, h, w = source.shape
    flat = source.reshape(n, c, h * w)
    picked = np.take_along_axis(flat, index.reshape(n, 1, h * w), axis=2)
    return picked.reshape(n, c, h, w)


def bilinear_sample(source: Tensor, flow: Tensor) -> Tensor:
    _check_shapes(source, flow)
    height, width = source.shape[2:]
    taps = _taps(flow, height, width)
    out = np.zeros_like(source)
    for k in range(4):
        out += _gather(source, taps.index[k]) * taps.weight[k][:, None]
    return check_finite(out, "bilinear_sample")


def bilinear_sample_backward(
    source: Tensor, flow: Tensor, grad_out: Tensor
) -> tuple[Tensor, Tensor]:
    _check_shapes(source, flow)
    if grad_out.shape != source.shape:
        raise ConfigurationError(f"grad_out {grad_out.shape} != output shape {source.shape}")
    n, c, height, width = source.shape
    taps = _taps(flow, height, width)

    grad_source = np.zeros((n, c, height * width))
    grad_flow = np.zeros_like(flow)
    batch_idx = np.arange(n)[:, None, None]
    channel_idx = np.arange(c)[None, :, None]
    for k in range(4):
        values = _gather(source, taps.index[k])
        weighted = (grad_out * taps.weight[k][:, None]).reshape(n, c, height * width)
        np.add.at(
            grad_source,
            (batch_idx, channel_idx, taps.index[k].reshape(n, 1, height * width)),
            weighted,
        )
        upstream = (grad_out * values).sum(axis=1)
        grad_flow[:, 0] += upstream * taps.dweight_dx[k]
        grad_flow[:, 1] += upstream * taps.dweight_dy[k]
    return grad_source.reshape(source.shape), grad_flow
