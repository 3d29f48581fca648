"""The view synthesis network and multi-view confidence fusion.

The network has three parts: an image encoder (strided convs + two fc
layers), a transform encoder (two fc layers) and a decoder (two fc layers
followed by upconvs) fed with the concatenation of both encodings. The last
decoder layer is the output head; what its channels mean depends on the
:class:`OutputMode`.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterator, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict
from scipy.special import expit

from .errors import ConfigurationError, UsageError
from .layers import (
    LayerParams,
    Tensor,
    concat,
    concat_backward,
    conv2d,
    conv2d_backward,
    fully_connected,
    fully_connected_backward,
    relu,
    relu_backward,
    upconv2d,
    upconv2d_backward,
)
from .sampler import bilinear_sample, bilinear_sample_backward

logger = logging.getLogger(__name__)

CONFIDENCE_EPS = 1e-8


class OutputMode(str, Enum):
    FLOW = "FLOW"
    PIXELS = "PIXELS"
    MASK = "MASK"
    FLOW_WITH_CONFIDENCE = "FLOW_WITH_CONFIDENCE"
    PIXELS_WITH_CONFIDENCE = "PIXELS_WITH_CONFIDENCE"


MODE_CHANNELS = {
    OutputMode.FLOW: 2,
    OutputMode.PIXELS: 3,
    OutputMode.MASK: 1,
    OutputMode.FLOW_WITH_CONFIDENCE: 3,
    OutputMode.PIXELS_WITH_CONFIDENCE: 4,
}

FLOW_MODES = {OutputMode.FLOW, OutputMode.FLOW_WITH_CONFIDENCE}
CONFIDENCE_MODES = {OutputMode.FLOW_WITH_CONFIDENCE, OutputMode.PIXELS_WITH_CONFIDENCE}


@dataclass(frozen=True)
class ViewTransform:
    """The relative viewpoint change fed to the transform encoder."""

    vector: Tensor

    def __len__(self) -> int:
        return self.vector.shape[0]


class NetworkConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    image_size: int = 64
    image_channels: int = 3
    encoder_channels: tuple[int, ...] = (16, 32, 64, 128, 256, 256)
    encoder_fc: tuple[int, int] = (512, 512)
    transform_size: int = 19
    transform_fc: tuple[int, int] = (64, 64)
    decoder_fc: tuple[int, int] = (512, 256)
    upconv_channels: tuple[int, ...] = (256, 128, 64, 32, 16)
    kernel_size: int = 3
    upconv_kernel_size: int = 4
    mode: OutputMode = OutputMode.FLOW
    head_init_scale: float = 0.1
    zero_head: bool = False

    @classmethod
    def tiny(cls, **overrides) -> NetworkConfig:
        """32x32 config with five convs, small enough for gradient checks."""
        values = dict(
            image_size=32,
            encoder_channels=(8, 16, 16, 32, 32),
            encoder_fc=(64, 64),
            transform_fc=(16, 16),
            decoder_fc=(64, 32),
            upconv_channels=(32, 16, 16, 8),
        )
        values.update(overrides)
        return cls(**values)

    @property
    def depth(self) -> int:
        return len(self.encoder_channels)

    @property
    def bottleneck_size(self) -> int:
        return self.image_size >> self.depth

    @property
    def bottleneck_channels(self) -> int:
        return self.decoder_fc[1] // (self.bottleneck_size**2)

    @property
    def output_channels(self) -> int:
        return MODE_CHANNELS[self.mode]

    def check(self) -> None:
        size = self.image_size
        if size < 2 or size & (size - 1):
            raise ConfigurationError(f"image_size must be a power of two, got {size}")
        if self.depth < 1 or size >> self.depth < 1 or (size >> self.depth) << self.depth != size:
            raise ConfigurationError(
                f"{self.depth} stride-2 convs cannot reduce {size} to an integer size >= 1"
            )
        if len(self.upconv_channels) != self.depth - 1:
            raise ConfigurationError(
                f"upconv_channels needs {self.depth - 1} entries for depth {self.depth}, "
                f"got {len(self.upconv_channels)}"
            )
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ConfigurationError("kernel_size must be odd")
        if self.upconv_kernel_size < 2 or self.upconv_kernel_size % 2:
            raise ConfigurationError("upconv_kernel_size must be even")
        widths = (
            *self.encoder_channels,
            *self.encoder_fc,
            *self.transform_fc,
            *self.decoder_fc,
            *self.upconv_channels,
        )
        if min(widths) < 1 or self.image_channels < 1 or self.transform_size < 1:
            raise ConfigurationError("all layer widths must be positive")
        if self.decoder_fc[1] % (self.bottleneck_size**2):
            raise ConfigurationError(
                f"decoder_fc[1]={self.decoder_fc[1]} cannot be reshaped to "
                f"{self.bottleneck_size}x{self.bottleneck_size} maps"
            )


@dataclass(frozen=True)
class _Op:
    kind: str  # conv | upconv | fc | reshape
    name: str = ""
    relu: bool = True
    shape: tuple[int, ...] = ()


@dataclass
class NetworkParams:
    """All learnable layers, in forward order."""

    config: NetworkConfig
    layers: dict[str, LayerParams]

    def __getitem__(self, name: str) -> LayerParams:
        return self.layers[name]

    def tensors(self) -> Iterator[tuple[str, Tensor]]:
        for name, layer in self.layers.items():
            yield f"{name}.weight", layer.weight
            yield f"{name}.bias", layer.bias

    def copy(self) -> NetworkParams:
        return NetworkParams(
            self.config,
            {
                name: LayerParams(name, layer.weight.copy(), layer.bias.copy())
                for name, layer in self.layers.items()
            },
        )

    @property
    def head_name(self) -> str:
        return f"dec_upconv{self.config.depth}"


# gradients keyed like NetworkParams.layers: name -> (grad_weight, grad_bias)
NetworkGrads = dict[str, tuple[Tensor, Tensor]]


def _image_ops(config: NetworkConfig) -> list[_Op]:
    ops = [_Op("conv", f"enc_conv{i + 1}") for i in range(config.depth)]
    ops.append(_Op("reshape", shape=(config.encoder_channels[-1] * config.bottleneck_size**2,)))
    ops += [_Op("fc", "enc_fc1"), _Op("fc", "enc_fc2")]
    return ops


def _transform_ops(config: NetworkConfig) -> list[_Op]:
    return [_Op("fc", "tf_fc1"), _Op("fc", "tf_fc2")]


def _decoder_ops(config: NetworkConfig) -> list[_Op]:
    b = config.bottleneck_size
    ops = [_Op("fc", "dec_fc1"), _Op("fc", "dec_fc2")]
    ops.append(_Op("reshape", shape=(config.bottleneck_channels, b, b)))
    for i in range(config.depth):
        last = i == config.depth - 1
        ops.append(_Op("upconv", f"dec_upconv{i + 1}", relu=not last))
    return ops


def layer_shapes(config: NetworkConfig) -> list[tuple[str, tuple[int, ...], int]]:
    """``(name, weight shape, fan_in)`` for every layer, in forward order."""
    config.check()
    k = config.kernel_size
    shapes: list[tuple[str, tuple[int, ...], int]] = []
    c_in = config.image_channels
    for i, c_out in enumerate(config.encoder_channels):
        shapes.append((f"enc_conv{i + 1}", (c_out, c_in, k, k), c_in * k * k))
        c_in = c_out
    d_in = config.encoder_channels[-1] * config.bottleneck_size**2
    for i, d_out in enumerate(config.encoder_fc):
        shapes.append((f"enc_fc{i + 1}", (d_out, d_in), d_in))
        d_in = d_out
    t_in = config.transform_size
    for i, t_out in enumerate(config.transform_fc):
        shapes.append((f"tf_fc{i + 1}", (t_out, t_in), t_in))
        t_in = t_out
    d_in = config.encoder_fc[-1] + config.transform_fc[-1]
    for i, d_out in enumerate(config.decoder_fc):
        shapes.append((f"dec_fc{i + 1}", (d_out, d_in), d_in))
        d_in = d_out
    uk = config.upconv_kernel_size
    c_in = config.bottleneck_channels
    for i, c_out in enumerate((*config.upconv_channels, config.output_channels)):
        # each output pixel of a stride-2 upconv sees k*k/4 taps per input channel
        shapes.append((f"dec_upconv{i + 1}", (c_in, c_out, uk, uk), c_in * uk * uk // 4))
        c_in = c_out
    return shapes


def bias_size(name: str, weight_shape: tuple[int, ...]) -> int:
    """Output width of layer ``name``; upconv weights are stored (C_in, C_out, k, k)."""
    return weight_shape[1] if name.startswith("dec_upconv") else weight_shape[0]


def build_network(config: NetworkConfig, seed: int) -> NetworkParams:
    """He-initialized parameters, on the single-precision grid, deterministic in ``seed``."""
    shapes = layer_shapes(config)
    rng = np.random.default_rng(seed)
    layers: dict[str, LayerParams] = {}
    for index, (name, shape, fan_in) in enumerate(shapes):
        weight = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
        if index == len(shapes) - 1:
            weight = np.zeros(shape) if config.zero_head else weight * config.head_init_scale
        weight = weight.astype(np.float32).astype(np.float64)
        layers[name] = LayerParams(name, weight, np.zeros(bias_size(name, shape)))
    logger.debug("built %d layers for %s", len(layers), config.mode.value)
    return NetworkParams(config, layers)


def zero_grads(params: NetworkParams) -> NetworkGrads:
    return {
        name: (np.zeros_like(layer.weight), np.zeros_like(layer.bias))
        for name, layer in params.layers.items()
    }


def add_grads(total: NetworkGrads, grads: NetworkGrads) -> NetworkGrads:
    for name, (gw, gb) in grads.items():
        tw, tb = total[name]
        tw += gw
        tb += gb
    return total


@dataclass
class _Record:
    op: _Op
    input: Tensor
    pre: Tensor | None = None


def _run(params: NetworkParams, ops: list[_Op], x: Tensor) -> tuple[Tensor, list[_Record]]:
    pad = (params.config.kernel_size - 1) // 2
    upad = (params.config.upconv_kernel_size - 2) // 2
    tape: list[_Record] = []
    for op in ops:
        if op.kind == "reshape":
            tape.append(_Record(op, x))
            x = x.reshape((x.shape[0], *op.shape))
            continue
        layer = params[op.name]
        if op.kind == "conv":
            pre = conv2d(x, layer, stride=2, pad=pad)
        elif op.kind == "upconv":
            pre = upconv2d(x, layer, stride=2, pad=upad)
        else:
            pre = fully_connected(x, layer)
        tape.append(_Record(op, x, pre))
        x = relu(pre) if op.relu else pre
    return x, tape


def _unrun(
    params: NetworkParams, tape: list[_Record], grad: Tensor, grads: NetworkGrads
) -> Tensor:
    pad = (params.config.kernel_size - 1) // 2
    upad = (params.config.upconv_kernel_size - 2) // 2
    for record in reversed(tape):
        op = record.op
        if op.kind == "reshape":
            grad = grad.reshape(record.input.shape)
            continue
        if op.relu:
            grad = relu_backward(record.pre, grad)
        layer = params[op.name]
        if op.kind == "conv":
            grad, gw, gb = conv2d_backward(record.input, layer, 2, pad, grad)
        elif op.kind == "upconv":
            grad, gw, gb = upconv2d_backward(record.input, layer, 2, upad, grad)
        else:
            grad, gw, gb = fully_connected_backward(record.input, layer, grad)
        tw, tb = grads[op.name]
        tw += gw
        tb += gb
    return grad


@dataclass
class Activations:
    """Everything the backward pass of one forward call needs."""

    mode: OutputMode
    source: Tensor
    image_tape: list[_Record]
    transform_tape: list[_Record]
    decoder_tape: list[_Record]
    image_features: int
    head: Tensor
    flow: Tensor | None


@dataclass
class SingleViewResult:
    prediction: Tensor
    flow: Tensor | None
    confidence: Tensor | None
    activations: Activations


def softplus(x: Tensor) -> Tensor:
    return np.logaddexp(0.0, x)


def _transform_batch(
    transform: ViewTransform | Sequence[ViewTransform] | Tensor, batch: int
) -> Tensor:
    if isinstance(transform, ViewTransform):
        vectors = np.tile(transform.vector, (batch, 1))
    elif isinstance(transform, np.ndarray):
        vectors = np.tile(transform, (batch, 1)) if transform.ndim == 1 else transform
    else:
        vectors = np.stack([t.vector for t in transform])
    if vectors.shape[0] != batch:
        raise ConfigurationError(f"{vectors.shape[0]} transforms for a batch of {batch}")
    return np.asarray(vectors, dtype=np.float64)


def forward_single(
    params: NetworkParams,
    source: Tensor,
    transform: ViewTransform | Sequence[ViewTransform] | Tensor,
    mode: OutputMode | None = None,
) -> SingleViewResult:
    config = params.config
    mode = OutputMode(mode) if mode is not None else config.mode
    if mode != config.mode:
        raise ConfigurationError(
            f"network built for {config.mode.value} cannot run in {mode.value} mode"
        )
    expected = (config.image_channels, config.image_size, config.image_size)
    if source.ndim != 4 or source.shape[1:] != expected:
        raise ConfigurationError(f"source shape {source.shape} does not match (N, *{expected})")
    vectors = _transform_batch(transform, source.shape[0])
    if vectors.shape[1] != config.transform_size:
        raise ConfigurationError(
            f"transform length {vectors.shape[1]} != configured {config.transform_size}"
        )

    image_features, image_tape = _run(params, _image_ops(config), source)
    transform_features, transform_tape = _run(params, _transform_ops(config), vectors)
    joint = concat(image_features, transform_features, axis=1)
    head, decoder_tape = _run(params, _decoder_ops(config), joint)

    flow = confidence = None
    if mode in FLOW_MODES:
        flow = head[:, :2]
        prediction = bilinear_sample(source, flow)
    elif mode == OutputMode.MASK:
        prediction = head
    else:
        prediction = head[:, :3]
    if mode in CONFIDENCE_MODES:
        confidence = softplus(head[:, -1:])

    activations = Activations(
        mode=mode,
        source=source,
        image_tape=image_tape,
        transform_tape=transform_tape,
        decoder_tape=decoder_tape,
        image_features=image_features.shape[1],
        head=head,
        flow=flow,
    )
    return SingleViewResult(prediction, flow, confidence, activations)


def forward_single_backward(
    params: NetworkParams,
    activations: Activations,
    grad_prediction: Tensor,
    grad_confidence: Tensor | None = None,
    grads: NetworkGrads | None = None,
) -> NetworkGrads:
    """Accumulate parameter gradients of one :func:`forward_single` call into ``grads``."""
    if grads is None:
        grads = zero_grads(params)
    mode = activations.mode
    head = activations.head
    grad_head = np.zeros_like(head)
    if mode in FLOW_MODES:
        _, grad_flow = bilinear_sample_backward(
            activations.source, activations.flow, grad_prediction
        )
        grad_head[:, :2] = grad_flow
    elif mode == OutputMode.MASK:
        grad_head[:] = grad_prediction
    else:
        grad_head[:, :3] = grad_prediction
    if mode in CONFIDENCE_MODES and grad_confidence is not None:
        grad_head[:, -1:] = grad_confidence * expit(head[:, -1:])

    grad_joint = _unrun(params, activations.decoder_tape, grad_head, grads)
    grad_image, grad_transform = concat_backward(activations.image_features, grad_joint, axis=1)
    _unrun(params, activations.image_tape, grad_image, grads)
    _unrun(params, activations.transform_tape, grad_transform, grads)
    return grads


def normalize_confidence(raw_masks: Sequence[Tensor]) -> list[Tensor]:
    """Per-pixel ``C_j / sum_k C_k``; pixels whose total is below eps get ``1/N``."""
    if not raw_masks:
        raise UsageError("normalize_confidence needs at least one mask")
    shape = raw_masks[0].shape
    if any(mask.shape != shape for mask in raw_masks):
        raise ConfigurationError("confidence masks must share one shape")
    total = raw_masks[0].copy()
    for mask in raw_masks[1:]:
        total += mask
    degenerate = total < CONFIDENCE_EPS
    safe_total = np.where(degenerate, 1.0, total)
    uniform = 1.0 / len(raw_masks)
    return [np.where(degenerate, uniform, mask / safe_total) for mask in raw_masks]


def normalize_confidence_backward(
    raw_masks: Sequence[Tensor], grad_normalized: Sequence[Tensor]
) -> list[Tensor]:
    total = raw_masks[0].copy()
    for mask in raw_masks[1:]:
        total += mask
    degenerate = total < CONFIDENCE_EPS
    safe_total = np.where(degenerate, 1.0, total)
    # sum_k C_k * dL/dCbar_k / S^2 is shared by every view
    shared = sum(mask * grad for mask, grad in zip(raw_masks, grad_normalized)) / safe_total**2
    return [
        np.where(degenerate, 0.0, grad / safe_total - shared) for grad in grad_normalized
    ]


def fuse_predictions(predictions: Sequence[Tensor], normalized_masks: Sequence[Tensor]) -> Tensor:
    if len(predictions) != len(normalized_masks):
        raise ConfigurationError(
            f"{len(predictions)} predictions but {len(normalized_masks)} masks"
        )
    if not predictions:
        raise UsageError("fuse_predictions needs at least one prediction")
    shape = predictions[0].shape
    for prediction, mask in zip(predictions, normalized_masks):
        if prediction.shape != shape:
            raise ConfigurationError("predictions must share one shape")
        if mask.shape != (shape[0], 1, *shape[2:]):
            raise ConfigurationError(f"mask shape {mask.shape} does not fit prediction {shape}")
    fused = normalized_masks[0] * predictions[0]
    for prediction, mask in zip(predictions[1:], normalized_masks[1:]):
        fused = fused + mask * prediction
    return fused


def fuse_predictions_backward(
    predictions: Sequence[Tensor], normalized_masks: Sequence[Tensor], grad_fused: Tensor
) -> tuple[list[Tensor], list[Tensor]]:
    grad_predictions = [mask * grad_fused for mask in normalized_masks]
    grad_masks = [
        (prediction * grad_fused).sum(axis=1, keepdims=True) for prediction in predictions
    ]
    return grad_predictions, grad_masks


@dataclass
class MultiViewResult:
    fused: Tensor
    predictions: list[Tensor]
    normalized_masks: list[Tensor]
    views: list[SingleViewResult] = field(default_factory=list)


def forward_multi(
    params: NetworkParams,
    sources: Sequence[Tensor],
    transforms: Sequence[ViewTransform | Sequence[ViewTransform] | Tensor],
) -> MultiViewResult:
    """Run the shared single-view network per input view and fuse by confidence."""
    if not sources:
        raise UsageError("forward_multi needs at least one input view")
    if len(sources) != len(transforms):
        raise ConfigurationError(f"{len(sources)} sources but {len(transforms)} transforms")
    if params.config.mode not in CONFIDENCE_MODES:
        raise ConfigurationError(
            f"multi-view fusion needs a confidence head, network mode is {params.config.mode.value}"
        )
    shape = sources[0].shape
    if any(source.shape != shape for source in sources):
        raise ConfigurationError("all input views must share one shape")

    views = [
        forward_single(params, source, transform)
        for source, transform in zip(sources, transforms)
    ]
    predictions = [view.prediction for view in views]
    normalized = normalize_confidence([view.confidence for view in views])
    fused = fuse_predictions(predictions, normalized)
    return MultiViewResult(fused, predictions, normalized, views)


def forward_multi_backward(
    params: NetworkParams,
    result: MultiViewResult,
    grad_fused: Tensor,
    grads: NetworkGrads | None = None,
) -> NetworkGrads:
    if grads is None:
        grads = zero_grads(params)
    grad_predictions, grad_normalized = fuse_predictions_backward(
        result.predictions, result.normalized_masks, grad_fused
    )
    grad_raw = normalize_confidence_backward(
        [view.confidence for view in result.views], grad_normalized
    )
    for view, grad_prediction, grad_confidence in zip(result.views, grad_predictions, grad_raw):
        forward_single_backward(params, view.activations, grad_prediction, grad_confidence, grads)
    return grads


def apply_foreground_mask(
    prediction: Tensor,
    mask_logits: Tensor,
    threshold: float = 0.5,
    background: Sequence[float] = (1.0, 1.0, 1.0),
) -> Tensor:
    """Replace pixels whose foreground probability is below ``threshold`` by ``background``."""
    if mask_logits.ndim != 4 or mask_logits.shape[1] != 1:
        raise ConfigurationError(f"mask logits must be (N, 1, H, W), got {mask_logits.shape}")
    if prediction.shape[0] != mask_logits.shape[0] or prediction.shape[2:] != mask_logits.shape[2:]:
        raise ConfigurationError(
            f"mask {mask_logits.shape} does not fit prediction {prediction.shape}"
        )
    color = np.asarray(background, dtype=np.float64).reshape(1, -1, 1, 1)
    if color.shape[1] != prediction.shape[1]:
        raise ConfigurationError(
            f"background has {color.shape[1]} channels, prediction has {prediction.shape[1]}"
        )
    foreground = expit(mask_logits) >= threshold
    return np.where(foreground, prediction, color)
