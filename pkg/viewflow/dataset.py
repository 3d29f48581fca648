"""Procedural sprite world with exactly known view-to-view warps.

Each instance is a textured convex polygon on a white canvas. Its view at
azimuth ``theta`` is the canonical image rotated in-plane about the canvas
centre by ``theta`` (bilinear resampling), so the flow between any two views
is a rotation and known in closed form.

On disk::

    <out>/manifest.json
    <out>/inst_<id>/view_<azimuth>.png   8-bit RGB
    <out>/inst_<id>/mask_<azimuth>.png   8-bit grayscale, 0 or 255
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw
from pydantic import BaseModel, ConfigDict, ValidationError
from scipy.ndimage import gaussian_filter
from scipy.spatial import ConvexHull

from .errors import ConfigurationError, DataError, UsageError
from .images import from_uint8, read_png_pixels, save_png, to_uint8
from .layers import Tensor
from .network import ViewTransform
from .sampler import bilinear_sample

logger = logging.getLogger(__name__)

# 64 MiB of 64 px views
DEFAULT_CACHE_SIZE = 4096

MANIFEST_VERSION = 1
MANIFEST_NAME = "manifest.json"
AZIMUTHS = tuple(range(0, 360, 5))
DELTAS = tuple(range(-180, 181, 20))
SUPPORTED_SIZES = (32, 64)
MIN_INSTANCES = 5
SPLITS = ("train", "test")


class DatasetManifest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    format_version: int = MANIFEST_VERSION
    seed: int
    instance_count: int
    image_size: int
    azimuths: tuple[int, ...] = AZIMUTHS
    deltas: tuple[int, ...] = DELTAS
    train_ids: list[int]
    test_ids: list[int]
    view_path: str = "inst_{instance:04d}/view_{azimuth:03d}.png"
    mask_path: str = "inst_{instance:04d}/mask_{azimuth:03d}.png"

    def split_ids(self, split: str) -> list[int]:
        if split not in SPLITS:
            raise UsageError(f"unknown split {split!r}, expected one of {SPLITS}")
        return self.train_ids if split == "train" else self.test_ids


def is_test_instance(seed: int, instance_id: int) -> bool:
    # one instance in every five consecutive ids is held out
    return (instance_id + seed) % 5 == 0


def wrap_delta(degrees: int) -> int:
    """Map an angle difference to (-180, 180]."""
    wrapped = (degrees + 180) % 360 - 180
    return 180 if wrapped == -180 else wrapped


def encode_transform(delta: int) -> ViewTransform:
    if delta not in DELTAS:
        raise DataError(f"azimuth delta {delta} is not one of {DELTAS[0]}..{DELTAS[-1]} step 20")
    vector = np.zeros(len(DELTAS))
    vector[(delta + 180) // 20] = 1.0
    return ViewTransform(vector)


def decode_transform(transform: ViewTransform) -> int:
    vector = transform.vector
    if vector.shape != (len(DELTAS),) or not (
        np.count_nonzero(vector) == 1 and vector.max() == 1.0
    ):
        raise DataError("transform is not a one-hot azimuth delta")
    return DELTAS[int(np.argmax(vector))]


def _cos_sin(degrees: float) -> tuple[float, float]:
    exact = {0: (1.0, 0.0), 90: (0.0, 1.0), 180: (-1.0, 0.0), 270: (0.0, -1.0)}
    key = degrees % 360
    if key in exact:
        return exact[key]
    radians = np.deg2rad(degrees)
    return float(np.cos(radians)), float(np.sin(radians))


def analytic_flow(theta_source: float, theta_target: float, height: int, width: int) -> Tensor:
    """Offsets (1, 2, H, W) sampling the source view to reproduce the target view.

    Target pixel ``p`` reads the source at ``R(theta_source - theta_target) (p - c) + c``
    with ``c`` the canvas centre; with x pointing right and y down, a positive
    angle turns +x towards +y.
    """
    cos, sin = _cos_sin(theta_source - theta_target)
    cx, cy = (width - 1) / 2.0, (height - 1) / 2.0
    ys, xs = np.meshgrid(
        np.arange(height, dtype=np.float64), np.arange(width, dtype=np.float64), indexing="ij"
    )
    dx, dy = xs - cx, ys - cy
    sx = cos * dx - sin * dy + cx
    sy = sin * dx + cos * dy + cy
    return np.stack([sx - xs, sy - ys])[None]


@dataclass(frozen=True)
class SpriteInstance:
    instance_id: int
    image: Tensor  # (3, H, W) on the 8-bit grid, white background
    mask: Tensor  # (1, H, W) of {0, 1}

    @property
    def size(self) -> int:
        return self.image.shape[1]


@dataclass(frozen=True)
class RenderedView:
    instance_id: int
    azimuth: int
    image: Tensor
    mask: Tensor


def make_sprite(seed: int, instance_id: int, size: int) -> SpriteInstance:
    """A smooth random texture stamped onto a random convex polygon."""
    rng = np.random.default_rng([seed, instance_id])
    centre = (size - 1) / 2.0
    # stays inside the canvas at every rotation
    reach = centre - 1.0
    count = int(rng.integers(5, 10))
    angles = rng.uniform(0.0, 2.0 * np.pi, count)
    radii = reach * rng.uniform(0.55, 1.0, count)
    points = np.stack([centre + radii * np.cos(angles), centre + radii * np.sin(angles)], axis=1)
    hull = points[ConvexHull(points).vertices]

    canvas = Image.new("L", (size, size), 0)
    ImageDraw.Draw(canvas).polygon([tuple(p) for p in hull], fill=255)
    mask = (np.asarray(canvas) > 0).astype(np.float64)[None]

    noise = gaussian_filter(rng.standard_normal((3, size, size)), sigma=(0, size / 10, size / 10))
    noise /= np.abs(noise).max() + 1e-12
    base = rng.uniform(0.2, 0.7, size=(3, 1, 1))
    texture = np.clip(base + 0.25 * noise, 0.0, 0.9)
    image = np.where(mask > 0, texture, 1.0)
    image = from_uint8(to_uint8(image))
    return SpriteInstance(instance_id, image, mask)


def render_view(sprite: SpriteInstance, azimuth: int) -> RenderedView:
    if azimuth % 360 == 0:
        return RenderedView(sprite.instance_id, azimuth, sprite.image.copy(), sprite.mask.copy())
    flow = analytic_flow(0, azimuth, sprite.size, sprite.size)
    # sample the inverted image so that the zero border reads as white
    image = 1.0 - bilinear_sample(1.0 - sprite.image[None], flow)[0]
    mask = (bilinear_sample(sprite.mask[None], flow)[0] >= 0.5).astype(np.float64)
    image = np.where(mask > 0, image, 1.0)
    return RenderedView(sprite.instance_id, azimuth, image, mask)


def _write_instance(out_dir: Path, manifest: DatasetManifest, instance_id: int) -> None:
    sprite = make_sprite(manifest.seed, instance_id, manifest.image_size)
    for azimuth in manifest.azimuths:
        view = render_view(sprite, azimuth)
        save_png(out_dir / manifest.view_path.format(instance=instance_id, azimuth=azimuth), view.image)
        save_png(out_dir / manifest.mask_path.format(instance=instance_id, azimuth=azimuth), view.mask)


def generate_dataset(
    seed: int, instance_count: int, size: int, out_dir: str | Path, workers: int = 1
) -> DatasetManifest:
    if size not in SUPPORTED_SIZES:
        raise ConfigurationError(f"unsupported image size {size}, expected one of {SUPPORTED_SIZES}")
    if instance_count < MIN_INSTANCES:
        raise UsageError(f"need at least {MIN_INSTANCES} instances, got {instance_count}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ids = range(instance_count)
    manifest = DatasetManifest(
        seed=seed,
        instance_count=instance_count,
        image_size=size,
        train_ids=[i for i in ids if not is_test_instance(seed, i)],
        test_ids=[i for i in ids if is_test_instance(seed, i)],
    )
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(lambda i: _write_instance(out_dir, manifest, i), ids))
    else:
        for instance_id in ids:
            _write_instance(out_dir, manifest, instance_id)
    (out_dir / MANIFEST_NAME).write_text(manifest.model_dump_json(indent=2) + "\n", encoding="utf-8")
    logger.info(
        "generated %d instances (%d train / %d test) at %dx%d in %s",
        instance_count,
        len(manifest.train_ids),
        len(manifest.test_ids),
        size,
        size,
        out_dir,
    )
    return manifest


def load_manifest(data_dir: str | Path) -> DatasetManifest:
    path = Path(data_dir) / MANIFEST_NAME
    try:
        manifest = DatasetManifest.model_validate_json(path.read_text(encoding="utf-8"))
    except ValidationError as exc:
        raise ConfigurationError(f"invalid dataset manifest {path}: {exc}") from exc
    if manifest.format_version != MANIFEST_VERSION:
        raise ConfigurationError(f"unsupported manifest version {manifest.format_version}")
    return manifest


class ViewStore:
    """Read access to a generated dataset with an in-memory 8-bit cache.

    The cache keeps the ``cache_size`` most recently used views (about 16 KiB
    each at 64 px); ``None`` keeps every view the store has read.
    """

    def __init__(
        self,
        root: str | Path,
        manifest: DatasetManifest | None = None,
        cache_size: int | None = DEFAULT_CACHE_SIZE,
    ):
        self.root = Path(root)
        self.manifest = manifest if manifest is not None else load_manifest(self.root)
        self._pixels = lru_cache(maxsize=cache_size)(self._read_pixels)

    def _read_pixels(self, instance_id: int, azimuth: int) -> tuple[np.ndarray, np.ndarray]:
        names = {"instance": instance_id, "azimuth": azimuth}
        view = read_png_pixels(self.root / self.manifest.view_path.format(**names), 3)
        mask = read_png_pixels(self.root / self.manifest.mask_path.format(**names), 1)
        return view, mask

    def cache_info(self):
        return self._pixels.cache_info()

    def view(self, instance_id: int, azimuth: int) -> RenderedView:
        view, mask = self._pixels(instance_id, azimuth)
        binary = (mask > 127).astype(np.float64).transpose(2, 0, 1)
        return RenderedView(instance_id, azimuth, from_uint8(view), binary)


@dataclass
class TrainingTuple:
    instance_id: int
    target_azimuth: int
    target: Tensor
    target_mask: Tensor
    source_azimuths: list[int] = field(default_factory=list)
    sources: list[Tensor] = field(default_factory=list)
    deltas: list[int] = field(default_factory=list)

    @property
    def transforms(self) -> list[ViewTransform]:
        return [encode_transform(delta) for delta in self.deltas]

    @property
    def source(self) -> Tensor:
        return self.sources[0]

    @property
    def transform(self) -> ViewTransform:
        return encode_transform(self.deltas[0])


def _sample(store: ViewStore, split: str, rng: np.random.Generator, views: int) -> TrainingTuple:
    manifest = store.manifest
    ids = manifest.split_ids(split)
    if not ids:
        raise UsageError(f"split {split!r} has no instances")
    available = set(manifest.azimuths)
    instance_id = ids[int(rng.integers(len(ids)))]
    target_azimuth = manifest.azimuths[int(rng.integers(len(manifest.azimuths)))]
    valid = [d for d in manifest.deltas if (target_azimuth - d) % 360 in available]
    target = store.view(instance_id, target_azimuth)
    sample = TrainingTuple(instance_id, target_azimuth, target.image, target.mask)
    for _ in range(views):
        delta = valid[int(rng.integers(len(valid)))]
        azimuth = (target_azimuth - delta) % 360
        sample.source_azimuths.append(azimuth)
        sample.sources.append(store.view(instance_id, azimuth).image)
        sample.deltas.append(delta)
    return sample


def sample_tuple_single(store: ViewStore, split: str, rng: np.random.Generator) -> TrainingTuple:
    """``<I_s, I_t, T>`` with ``T`` encoding the target azimuth minus the source azimuth."""
    return _sample(store, split, rng, 1)


def sample_tuple_multi(
    store: ViewStore, split: str, rng: np.random.Generator, views: int = 2
) -> TrainingTuple:
    """One target with ``views`` independently drawn sources; sources may coincide."""
    if views < 1:
        raise UsageError("multi-view tuples need at least one source")
    return _sample(store, split, rng, views)
