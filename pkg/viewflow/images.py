from __future__ import annotations

import io
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigurationError
from .layers import Tensor


def to_uint8(image: Tensor) -> np.ndarray:
    """``(C, H, W)`` floats in [0, 1] to an ``(H, W, C)`` 8-bit array."""
    if image.ndim != 3 or image.shape[0] not in (1, 3):
        raise ConfigurationError(f"expected a (1|3, H, W) image, got {image.shape}")
    scaled = np.rint(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    return np.ascontiguousarray(scaled.transpose(1, 2, 0))


def from_uint8(pixels: np.ndarray) -> Tensor:
    if pixels.ndim == 2:
        pixels = pixels[:, :, None]
    return pixels.transpose(2, 0, 1).astype(np.float64) / 255.0


def to_pil(image: Tensor) -> Image.Image:
    pixels = to_uint8(image)
    if pixels.shape[2] == 1:
        return Image.fromarray(pixels[:, :, 0])
    return Image.fromarray(pixels)


def encode_png(img: Image.Image) -> bytes:
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return buf.getvalue()


def save_png(path: str | Path, image: Tensor | Image.Image) -> None:
    img = image if isinstance(image, Image.Image) else to_pil(image)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_png(img))


def read_png_pixels(path: str | Path, channels: int = 3) -> np.ndarray:
    """8-bit ``(H, W, C)`` pixels of a PNG converted to RGB or grayscale."""
    with Image.open(path) as img:
        img = img.convert("RGB" if channels == 3 else "L")
        pixels = np.asarray(img, dtype=np.uint8)
    return pixels if pixels.ndim == 3 else pixels[:, :, None]


def load_png(path: str | Path, channels: int = 3) -> Tensor:
    return from_uint8(read_png_pixels(path, channels))
