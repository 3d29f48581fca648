"""Foreground L1 evaluation, cross-view confusion matrices and synthesis helpers."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict
from scipy.special import expit

from .checkpoint import Checkpoint
from .dataset import (
    DELTAS,
    TrainingTuple,
    ViewStore,
    analytic_flow,
    encode_transform,
    sample_tuple_multi,
    sample_tuple_single,
    wrap_delta,
)
from .errors import ConfigurationError, UsageError
from .layers import Tensor
from .network import (
    CONFIDENCE_MODES,
    NetworkParams,
    OutputMode,
    apply_foreground_mask,
    forward_multi,
    forward_single,
)
from .sampler import bilinear_sample

logger = logging.getLogger(__name__)

# mean foreground L1 of the analytic warp on rendered pairs (two bilinear resamplings)
RESAMPLING_L1_BOUND = 0.02
CONFUSION_STEP = 20


def mean_foreground_l1(prediction: Tensor, target: Tensor, target_mask: Tensor) -> float | None:
    """Mean ``|prediction - target|`` over foreground pixels and channels.

    Returns ``None`` when the mask has no foreground pixel.
    """
    if prediction.shape != target.shape:
        raise ConfigurationError(f"prediction {prediction.shape} != target {target.shape}")
    if target_mask.shape != (1, *target.shape[1:]):
        raise ConfigurationError(f"mask {target_mask.shape} does not fit target {target.shape}")
    if not np.isin(target_mask, (0.0, 1.0)).all():
        raise ConfigurationError("foreground mask must be binary")
    foreground = target_mask[0] > 0
    pixels = int(foreground.sum())
    if pixels == 0:
        return None
    diff = np.abs(prediction - target)[:, foreground]
    return float(diff.sum() / (pixels * prediction.shape[0]))


@dataclass
class Synthesis:
    prediction: Tensor  # (3, H, W) image, or (1, H, W) logits for mask networks
    flows: list[Tensor] = field(default_factory=list)
    confidences: list[Tensor] = field(default_factory=list)


class Synthesizer(Protocol):
    image_size: int
    views: int
    predicts_mask: bool

    def synthesize(self, sources: Sequence[Tensor], deltas: Sequence[int]) -> Synthesis: ...


def synthesize(params: NetworkParams, sources: Sequence[Tensor], deltas: Sequence[int]) -> Synthesis:
    """Predict the target view from ``(3, H, W)`` sources and their azimuth deltas."""
    if not sources or len(sources) != len(deltas):
        raise UsageError(f"{len(sources)} inputs but {len(deltas)} deltas")
    mode = params.config.mode
    transforms = [encode_transform(delta) for delta in deltas]
    if mode in CONFIDENCE_MODES:
        result = forward_multi(params, [source[None] for source in sources], transforms)
        flows = [view.flow[0] for view in result.views if view.flow is not None]
        return Synthesis(result.fused[0], flows, [mask[0] for mask in result.normalized_masks])
    if len(sources) != 1:
        raise UsageError(f"a {mode.value} network takes exactly one input view")
    result = forward_single(params, sources[0][None], transforms[0])
    flows = [result.flow[0]] if result.flow is not None else []
    return Synthesis(result.prediction[0], flows)


class NetworkSynthesizer:
    def __init__(
        self,
        checkpoint: Checkpoint,
        mask_checkpoint: Checkpoint | None = None,
        views: int | None = None,
    ):
        self.params = checkpoint.params
        config = self.params.config
        self.image_size = config.image_size
        self.predicts_mask = config.mode == OutputMode.MASK
        self.views = views or (2 if config.mode in CONFIDENCE_MODES else 1)
        if self.views > 1 and config.mode not in CONFIDENCE_MODES:
            raise ConfigurationError(f"a {config.mode.value} network takes exactly one input view")
        self.mask_params = None
        if mask_checkpoint is not None:
            if mask_checkpoint.config.mode != OutputMode.MASK:
                raise ConfigurationError("the foreground checkpoint is not a mask network")
            if mask_checkpoint.config.image_size != self.image_size:
                raise ConfigurationError("the foreground checkpoint has a different image size")
            self.mask_params = mask_checkpoint.params

    def synthesize(self, sources: Sequence[Tensor], deltas: Sequence[int]) -> Synthesis:
        synthesis = synthesize(self.params, sources, deltas)
        if self.mask_params is not None and not self.predicts_mask:
            logits = synthesize(self.mask_params, sources[:1], deltas[:1]).prediction
            synthesis.prediction = apply_foreground_mask(synthesis.prediction[None], logits[None])[0]
        return synthesis


class OracleSynthesizer:
    """Warps the first source with the exact rotation between the two views."""

    predicts_mask = False
    views = 1

    def __init__(self, image_size: int):
        self.image_size = image_size

    def synthesize(self, sources: Sequence[Tensor], deltas: Sequence[int]) -> Synthesis:
        height, width = sources[0].shape[1:]
        # the target sits delta degrees past the source
        flow = analytic_flow(0, deltas[0], height, width)
        # zero border reads as white, as in the rendered views
        prediction = 1.0 - bilinear_sample(1.0 - sources[0][None], flow)[0]
        return Synthesis(prediction, [flow[0]])


class DeltaStat(BaseModel):
    delta: int
    count: int
    mean: float | None


class EvalReport(BaseModel):
    model_config = ConfigDict(extra="forbid")

    split: str
    seed: int
    tuples: int
    evaluated: int
    undefined: int
    overall_l1: float | None = None
    pixel_accuracy: float | None = None
    per_delta: list[DeltaStat]


def _check_compatible(synthesizer: Synthesizer, store: ViewStore) -> None:
    if synthesizer.image_size != store.manifest.image_size:
        raise ConfigurationError(
            f"network expects {synthesizer.image_size}px images, dataset has "
            f"{store.manifest.image_size}px"
        )


def _score(synthesizer: Synthesizer, sample: TrainingTuple) -> float | None:
    synthesis = synthesizer.synthesize(sample.sources, sample.deltas)
    if synthesizer.predicts_mask:
        predicted = expit(synthesis.prediction) >= 0.5
        return float((predicted == (sample.target_mask > 0)).mean())
    return mean_foreground_l1(synthesis.prediction, sample.target, sample.target_mask)


def evaluate(
    synthesizer: Synthesizer,
    store: ViewStore,
    split: str = "test",
    tuples: int = 20_000,
    seed: int = 0,
    threads: int = 1,
) -> EvalReport:
    """Score ``tuples`` sampled test tuples, averaging per tuple.

    Synthesis networks are scored by foreground L1, mask networks by pixel
    accuracy. Tuples without foreground are counted as undefined and left out.
    """
    if tuples < 1:
        raise UsageError("evaluation needs at least one tuple")
    _check_compatible(synthesizer, store)
    rng = np.random.default_rng(seed)
    if synthesizer.views > 1:
        samples = [sample_tuple_multi(store, split, rng, synthesizer.views) for _ in range(tuples)]
    else:
        samples = [sample_tuple_single(store, split, rng) for _ in range(tuples)]

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            scores = list(pool.map(lambda s: _score(synthesizer, s), samples))
    else:
        scores = [_score(synthesizer, s) for s in samples]

    by_delta: dict[int, list[float]] = {delta: [] for delta in DELTAS}
    values: list[float] = []
    undefined = 0
    for sample, score in zip(samples, scores):
        if score is None:
            undefined += 1
            continue
        values.append(score)
        by_delta[sample.deltas[0]].append(score)
    if undefined:
        logger.warning("%d of %d tuples had no foreground and were skipped", undefined, tuples)

    overall = float(sum(values) / len(values)) if values else None
    report = EvalReport(
        split=split,
        seed=seed,
        tuples=tuples,
        evaluated=len(values),
        undefined=undefined,
        per_delta=[
            DeltaStat(delta=delta, count=len(s), mean=float(sum(s) / len(s)) if s else None)
            for delta, s in by_delta.items()
        ],
    )
    if synthesizer.predicts_mask:
        report.pixel_accuracy = overall
    else:
        report.overall_l1 = overall
    logger.info(
        "evaluated %d tuples on %s: %s = %s",
        len(values),
        split,
        "pixel_accuracy" if synthesizer.predicts_mask else "overall_l1",
        overall,
    )
    return report


class ConfusionMatrix(BaseModel):
    """Mean foreground L1 for target azimuth (column) from input azimuth (row)."""

    model_config = ConfigDict(extra="forbid")

    bins: list[int]
    mean_l1: list[list[float | None]]
    counts: list[list[int]]

    def values(self) -> np.ndarray:
        return np.array(
            [[np.nan if v is None else v for v in row] for row in self.mean_l1], dtype=np.float64
        )

    def cell_delta(self, row: int, col: int) -> int:
        return wrap_delta(self.bins[col] - self.bins[row])

    @property
    def overall_l1(self) -> float | None:
        """Sample-weighted mean over all defined cells."""
        total = weight = 0.0
        for row_means, row_counts in zip(self.mean_l1, self.counts):
            for mean, count in zip(row_means, row_counts):
                if mean is not None and count:
                    total += mean * count
                    weight += count
        return total / weight if weight else None

    def cell_mean(self, max_abs_delta: int | None = None) -> float | None:
        """Unweighted mean over defined cells, optionally only those with ``|delta| <= max_abs_delta``."""
        picked = [
            mean
            for r, row in enumerate(self.mean_l1)
            for c, mean in enumerate(row)
            if mean is not None
            and (max_abs_delta is None or abs(self.cell_delta(r, c)) <= max_abs_delta)
        ]
        return sum(picked) / len(picked) if picked else None


def confusion_matrix(
    synthesizer: Synthesizer,
    store: ViewStore,
    split: str = "test",
    samples_per_cell: int = 10,
    seed: int = 0,
) -> ConfusionMatrix:
    if samples_per_cell < 1:
        raise UsageError("confusion matrix needs at least one sample per cell")
    if synthesizer.predicts_mask:
        raise ConfigurationError("confusion matrices are defined for synthesis networks only")
    _check_compatible(synthesizer, store)
    ids = store.manifest.split_ids(split)
    if not ids:
        raise UsageError(f"split {split!r} has no instances")
    available = set(store.manifest.azimuths)
    bins = list(range(0, 360, CONFUSION_STEP))
    rng = np.random.default_rng(seed)
    means: list[list[float | None]] = []
    counts: list[list[int]] = []
    for row in bins:
        row_means: list[float | None] = []
        row_counts: list[int] = []
        for col in bins:
            scores = []
            if row in available and col in available:
                delta = wrap_delta(col - row)
                for _ in range(samples_per_cell):
                    instance = ids[int(rng.integers(len(ids)))]
                    source = store.view(instance, row)
                    target = store.view(instance, col)
                    prediction = synthesizer.synthesize([source.image], [delta]).prediction
                    score = mean_foreground_l1(prediction, target.image, target.mask)
                    if score is not None:
                        scores.append(score)
            row_means.append(float(sum(scores) / len(scores)) if scores else None)
            row_counts.append(len(scores))
        means.append(row_means)
        counts.append(row_counts)
    matrix = ConfusionMatrix(bins=bins, mean_l1=means, counts=counts)
    logger.info("confusion matrix over %d bins: overall_l1 = %s", len(bins), matrix.overall_l1)
    return matrix
