"""Dense layer primitives with hand-derived backward passes.

Image-like tensors are ``(batch, channel, height, width)`` float64 arrays.
Convolution is cross-correlation with zero padding. Every backward function
takes the forward inputs plus the gradient of a scalar loss with respect to the
forward output and returns gradients with respect to each input.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import numpy.typing as npt
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigurationError, NonFiniteError

Tensor = npt.NDArray[np.float64]


@dataclass(frozen=True)
class LayerParams:
    """Weight and bias of one layer, identified by ``name``."""

    name: str
    weight: Tensor
    bias: Tensor


def check_finite(tensor: Tensor, where: str) -> Tensor:
    if not np.isfinite(tensor).all():
        raise NonFiniteError(f"{where} produced non-finite values")
    return tensor


def _require_rank(tensor: Tensor, rank: int, what: str) -> None:
    if tensor.ndim != rank:
        raise ConfigurationError(f"{what} must have rank {rank}, got shape {tensor.shape}")


def conv_output_size(size: int, kernel: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - kernel) // stride + 1


def upconv_output_size(size: int, kernel: int, stride: int, pad: int) -> int:
    return (size - 1) * stride - 2 * pad + kernel


def _windows(padded: Tensor, kernel: int, stride: int) -> Tensor:
    # (N, C, H_out, W_out, k, k) view into the padded input
    return sliding_window_view(padded, (kernel, kernel), axis=(2, 3))[
        :, :, ::stride, ::stride
    ]


def _pad(tensor: Tensor, pad: int) -> Tensor:
    if pad == 0:
        return tensor
    return np.pad(tensor, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def _unpad(tensor: Tensor, pad: int) -> Tensor:
    if pad == 0:
        return tensor
    return tensor[:, :, pad:-pad, pad:-pad]


def _check_conv(input: Tensor, params: LayerParams, stride: int, pad: int) -> int:
    _require_rank(input, 4, "conv2d input")
    _require_rank(params.weight, 4, f"{params.name} weight")
    c_out, c_in, kh, kw = params.weight.shape
    if kh != kw:
        raise ConfigurationError(f"{params.name}: only square kernels are supported")
    if input.shape[1] != c_in:
        raise ConfigurationError(
            f"{params.name}: input has {input.shape[1]} channels, weight expects {c_in}"
        )
    if params.bias.shape != (c_out,):
        raise ConfigurationError(f"{params.name}: bias shape {params.bias.shape} != ({c_out},)")
    if stride < 1 or pad < 0:
        raise ConfigurationError(f"{params.name}: invalid stride {stride} or pad {pad}")
    h, w = input.shape[2:]
    if conv_output_size(h, kh, stride, pad) < 1 or conv_output_size(w, kh, stride, pad) < 1:
        raise ConfigurationError(f"{params.name}: input {h}x{w} too small for kernel {kh}")
    return kh


def conv2d(input: Tensor, params: LayerParams, stride: int = 1, pad: int = 0) -> Tensor:
    kernel = _check_conv(input, params, stride, pad)
    windows = _windows(_pad(input, pad), kernel, stride)
    out = np.tensordot(windows, params.weight, axes=([1, 4, 5], [1, 2, 3]))
    out = out.transpose(0, 3, 1, 2) + params.bias[None, :, None, None]
    return check_finite(np.ascontiguousarray(out), params.name)


def conv2d_backward(
    input: Tensor, params: LayerParams, stride: int, pad: int, grad_out: Tensor
) -> tuple[Tensor, Tensor, Tensor]:
    kernel = _check_conv(input, params, stride, pad)
    n, _, h, w = input.shape
    h_out = conv_output_size(h, kernel, stride, pad)
    w_out = conv_output_size(w, kernel, stride, pad)
    expected = (n, params.weight.shape[0], h_out, w_out)
    if grad_out.shape != expected:
        raise ConfigurationError(f"{params.name}: grad_out {grad_out.shape} != {expected}")

    padded = _pad(input, pad)
    windows = _windows(padded, kernel, stride)
    grad_weight = np.tensordot(grad_out, windows, axes=([0, 2, 3], [0, 2, 3]))
    grad_bias = grad_out.sum(axis=(0, 2, 3))

    grad_padded = np.zeros_like(padded)
    for i in range(kernel):
        for j in range(kernel):
            contrib = np.tensordot(grad_out, params.weight[:, :, i, j], axes=([1], [0]))
            grad_padded[
                :, :, i : i + stride * h_out : stride, j : j + stride * w_out : stride
            ] += contrib.transpose(0, 3, 1, 2)
    return np.ascontiguousarray(_unpad(grad_padded, pad)), grad_weight, grad_bias


def _check_upconv(input: Tensor, params: LayerParams, stride: int, pad: int) -> int:
    _require_rank(input, 4, "upconv2d input")
    _require_rank(params.weight, 4, f"{params.name} weight")
    c_in, c_out, kh, kw = params.weight.shape
    if kh != kw:
        raise ConfigurationError(f"{params.name}: only square kernels are supported")
    if input.shape[1] != c_in:
        raise ConfigurationError(
            f"{params.name}: input has {input.shape[1]} channels, weight expects {c_in}"
        )
    if params.bias.shape != (c_out,):
        raise ConfigurationError(f"{params.name}: bias shape {params.bias.shape} != ({c_out},)")
    if stride < 1 or pad < 0:
        raise ConfigurationError(f"{params.name}: invalid stride {stride} or pad {pad}")
    h, w = input.shape[2:]
    if upconv_output_size(h, kh, stride, pad) < 1 or upconv_output_size(w, kh, stride, pad) < 1:
        raise ConfigurationError(f"{params.name}: padding {pad} consumes the whole output")
    return kh


def upconv2d(input: Tensor, params: LayerParams, stride: int = 1, pad: int = 0) -> Tensor:
    """Transposed convolution, the adjoint of :func:`conv2d` with the same weight.

    ``params.weight`` has shape ``(C_in, C_out, k, k)``.
    """
    kernel = _check_upconv(input, params, stride, pad)
    n, _, h, w = input.shape
    c_out = params.weight.shape[1]
    full = np.zeros((n, c_out, (h - 1) * stride + kernel, (w - 1) * stride + kernel))
    for i in range(kernel):
        for j in range(kernel):
            contrib = np.tensordot(input, params.weight[:, :, i, j], axes=([1], [0]))
            full[:, :, i : i + stride * h : stride, j : j + stride * w : stride] += (
                contrib.transpose(0, 3, 1, 2)
            )
    out = _unpad(full, pad) + params.bias[None, :, None, None]
    return check_finite(np.ascontiguousarray(out), params.name)


def upconv2d_backward(
    input: Tensor, params: LayerParams, stride: int, pad: int, grad_out: Tensor
) -> tuple[Tensor, Tensor, Tensor]:
    kernel = _check_upconv(input, params, stride, pad)
    n, _, h, w = input.shape
    expected = (
        n,
        params.weight.shape[1],
        upconv_output_size(h, kernel, stride, pad),
        upconv_output_size(w, kernel, stride, pad),
    )
    if grad_out.shape != expected:
        raise ConfigurationError(f"{params.name}: grad_out {grad_out.shape} != {expected}")

    windows = _windows(_pad(grad_out, pad), kernel, stride)
    grad_input = np.tensordot(windows, params.weight, axes=([1, 4, 5], [1, 2, 3]))
    grad_input = np.ascontiguousarray(grad_input.transpose(0, 3, 1, 2))
    grad_weight = np.tensordot(input, windows, axes=([0, 2, 3], [0, 2, 3]))
    grad_bias = grad_out.sum(axis=(0, 2, 3))
    return grad_input, grad_weight, grad_bias


def _check_fc(input: Tensor, params: LayerParams) -> None:
    _require_rank(input, 2, "fully_connected input")
    _require_rank(params.weight, 2, f"{params.name} weight")
    d_out, d_in = params.weight.shape
    if input.shape[1] != d_in:
        raise ConfigurationError(
            f"{params.name}: input width {input.shape[1]} != weight width {d_in}"
        )
    if params.bias.shape != (d_out,):
        raise ConfigurationError(f"{params.name}: bias shape {params.bias.shape} != ({d_out},)")


def fully_connected(input: Tensor, params: LayerParams) -> Tensor:
    _check_fc(input, params)
    return check_finite(input @ params.weight.T + params.bias, params.name)


def fully_connected_backward(
    input: Tensor, params: LayerParams, grad_out: Tensor
) -> tuple[Tensor, Tensor, Tensor]:
    _check_fc(input, params)
    expected = (input.shape[0], params.weight.shape[0])
    if grad_out.shape != expected:
        raise ConfigurationError(f"{params.name}: grad_out {grad_out.shape} != {expected}")
    return grad_out @ params.weight, grad_out.T @ input, grad_out.sum(axis=0)


def relu(input: Tensor) -> Tensor:
    return np.maximum(input, 0.0)


def relu_backward(input: Tensor, grad_out: Tensor) -> Tensor:
    # subgradient at exactly 0 is 0
    return np.where(input > 0.0, grad_out, 0.0)


def concat(a: Tensor, b: Tensor, axis: int = 1) -> Tensor:
    if a.ndim != b.ndim:
        raise ConfigurationError(f"cannot concatenate rank {a.ndim} with rank {b.ndim}")
    axis = axis % a.ndim
    for dim in range(a.ndim):
        if dim != axis and a.shape[dim] != b.shape[dim]:
            raise ConfigurationError(
                f"concat along axis {axis}: shapes {a.shape} and {b.shape} differ off-axis"
            )
    return np.concatenate([a, b], axis=axis)


def concat_backward(a_size: int, grad_out: Tensor, axis: int = 1) -> tuple[Tensor, Tensor]:
    """Split ``grad_out`` back into the gradients of the two concatenated inputs."""
    axis = axis % grad_out.ndim
    if not 0 <= a_size <= grad_out.shape[axis]:
        raise ConfigurationError(
            f"split point {a_size} outside axis of length {grad_out.shape[axis]}"
        )
    grad_a, grad_b = np.split(grad_out, [a_size], axis=axis)
    return grad_a, grad_b
