"""Heatmaps and flow overlays rendered with Pillow.

Heatmaps use matplotlib's ``jet`` colormap (blue low, red high) quantized to
256 levels.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

import matplotlib
import numpy as np
from PIL import Image, ImageDraw

from .errors import ConfigurationError
from .images import to_uint8
from .layers import Tensor
from .sampler import absolute_coords, bilinear_sample

GUTTER = 8
GUTTER_COLOR = (128, 128, 128)
UNDEFINED_COLOR = (160, 160, 160)


@lru_cache(maxsize=1)
def colormap_lut() -> np.ndarray:
    rgba = matplotlib.colormaps["jet"](np.linspace(0.0, 1.0, 256))
    return np.rint(rgba[:, :3] * 255.0).astype(np.uint8)


def colormap_levels(values: np.ndarray, low: float = 0.0, high: float = 1.0) -> np.ndarray:
    """Quantized colormap index of each value; monotone in the value."""
    span = high - low if high > low else 1.0
    scaled = np.clip((np.asarray(values, dtype=np.float64) - low) / span, 0.0, 1.0)
    return np.rint(scaled * 255.0).astype(np.uint8)


def heatmap(values: np.ndarray, low: float = 0.0, high: float = 1.0) -> Image.Image:
    """``(H, W)`` values to an RGB image; NaN cells are drawn gray."""
    values = np.asarray(values, dtype=np.float64)
    undefined = np.isnan(values)
    pixels = colormap_lut()[colormap_levels(np.where(undefined, low, values), low, high)]
    pixels[undefined] = UNDEFINED_COLOR
    return Image.fromarray(np.ascontiguousarray(pixels))


def visualize_confidence(normalized_masks: Sequence[Tensor]) -> list[Image.Image]:
    """One heatmap per view of its normalized confidence mask, on a fixed [0, 1] scale."""
    images = []
    for mask in normalized_masks:
        mask = np.asarray(mask)
        while mask.ndim > 2:
            if mask.shape[0] != 1:
                raise ConfigurationError(f"expected a single mask, got shape {mask.shape}")
            mask = mask[0]
        images.append(heatmap(mask))
    return images


@dataclass
class FlowOverlay:
    image: Image.Image
    # ((target x, target y), (source x, source y)) in canvas coordinates
    segments: list[tuple[tuple[float, float], tuple[float, float]]]


def visualize_flow(
    source: Tensor,
    flow: Tensor,
    sample_count: int,
    seed: int,
    target: Tensor | None = None,
    gutter: int = GUTTER,
) -> FlowOverlay:
    """Target (left) and source (right) panels joined by lines from sampled
    target pixels to the source coordinates their flow reads from.

    Without ``target`` the left panel shows the view synthesized from ``source``.
    """
    if source.ndim != 3 or flow.shape != (2, *source.shape[1:]):
        raise ConfigurationError(f"flow {flow.shape} does not fit source {source.shape}")
    height, width = source.shape[1:]
    if target is None:
        target = bilinear_sample(source[None], flow[None])[0]

    canvas = Image.new("RGB", (2 * width + gutter, height), GUTTER_COLOR)
    canvas.paste(Image.fromarray(to_uint8(target)), (0, 0))
    canvas.paste(Image.fromarray(to_uint8(source)), (width + gutter, 0))

    coords = absolute_coords(flow[None])[0]
    rng = np.random.default_rng(seed)
    count = min(sample_count, height * width)
    picks = np.sort(rng.choice(height * width, size=count, replace=False))
    lut = colormap_lut()
    draw = ImageDraw.Draw(canvas)
    segments = []
    for rank, index in enumerate(picks):
        v, u = divmod(int(index), width)
        start = (float(u), float(v))
        end = (float(coords[0, v, u]) + width + gutter, float(coords[1, v, u]))
        color = tuple(int(c) for c in lut[(rank * 255) // max(count - 1, 1)])
        draw.line([start, end], fill=color, width=1)
        segments.append((start, end))
    return FlowOverlay(canvas, segments)


def confusion_heatmap(
    values: np.ndarray, labels: Sequence[int], cell: int = 16, margin: int = 28
) -> Image.Image:
    """Matrix heatmap scaled to its own min/max, with azimuth labels on both axes."""
    values = np.asarray(values, dtype=np.float64)
    defined = values[~np.isnan(values)]
    low = float(defined.min()) if defined.size else 0.0
    high = float(defined.max()) if defined.size else 1.0
    grid = heatmap(values, low, high).resize(
        (values.shape[1] * cell, values.shape[0] * cell), Image.Resampling.NEAREST
    )
    canvas = Image.new("RGB", (grid.width + margin, grid.height + margin), (255, 255, 255))
    canvas.paste(grid, (margin, margin))
    draw = ImageDraw.Draw(canvas)
    for i, label in enumerate(labels):
        # rows are input views, columns target views
        draw.text((2, margin + i * cell + 2), str(label), fill=(0, 0, 0))
        draw.text((margin + i * cell + 1, 2 + (i % 2) * 10), str(label), fill=(0, 0, 0))
    return canvas
