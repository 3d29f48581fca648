"""Mini-batch training over sampled view tuples.

Each batch is evaluated one example at a time and the per-example gradients
are summed in index order, whether the examples run serially or on a thread
pool, so a seed fixes the whole loss trajectory.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from .checkpoint import Checkpoint, save_checkpoint
from .config import MULTI_VIEW_MODES, RunConfig, TrainingMode
from .dataset import TrainingTuple, ViewStore, sample_tuple_multi, sample_tuple_single
from .errors import ConfigurationError, NonFiniteError, TrainingDivergedError
from .losses import cross_entropy_loss, l1_loss
from .network import (
    NetworkGrads,
    NetworkParams,
    add_grads,
    build_network,
    forward_multi,
    forward_multi_backward,
    forward_single,
    forward_single_backward,
    zero_grads,
)
from .optim import AdamState, adam_step

logger = logging.getLogger(__name__)


def format_log_line(iteration: int, loss: float) -> str:
    return f"{iteration}\t{loss:.9g}\n"


def example_loss(
    params: NetworkParams, mode: TrainingMode, sample: TrainingTuple
) -> tuple[float, NetworkGrads]:
    """Loss of one tuple and its gradient with respect to every parameter."""
    target = sample.target[None]
    if mode in MULTI_VIEW_MODES:
        result = forward_multi(
            params, [source[None] for source in sample.sources], sample.transforms
        )
        loss, grad = l1_loss(result.fused, target)
        return loss, forward_multi_backward(params, result, grad)
    result = forward_single(params, sample.source[None], sample.transform)
    if mode == TrainingMode.Mask:
        loss, grad = cross_entropy_loss(result.prediction, sample.target_mask[None])
    else:
        loss, grad = l1_loss(result.prediction, target)
    return loss, forward_single_backward(params, result.activations, grad)


def batch_loss(
    params: NetworkParams,
    mode: TrainingMode,
    batch: list[TrainingTuple],
    mapper: Callable[..., Iterable] = map,
) -> tuple[float, NetworkGrads]:
    """Mean loss and gradient over ``batch``, reduced in index order."""
    outcomes = list(mapper(lambda sample: example_loss(params, mode, sample), batch))
    total_loss = 0.0
    grads = zero_grads(params)
    for loss, example_grads in outcomes:
        total_loss += loss
        add_grads(grads, example_grads)
    scale = 1.0 / len(batch)
    for gw, gb in grads.values():
        gw *= scale
        gb *= scale
    return total_loss * scale, grads


def sample_batch(
    store: ViewStore, run: RunConfig, rng: np.random.Generator, split: str = "train"
) -> list[TrainingTuple]:
    settings = run.training
    if settings.mode in MULTI_VIEW_MODES:
        return [
            sample_tuple_multi(store, split, rng, settings.views)
            for _ in range(settings.batch_size)
        ]
    return [sample_tuple_single(store, split, rng) for _ in range(settings.batch_size)]


def initial_checkpoint(run: RunConfig, iterations: int | None = None) -> Checkpoint:
    network = run.resolved_network()
    params = build_network(network, run.seed)
    budget = run.training.iterations if iterations is None else iterations
    adam = AdamState.for_params(
        params, run.optimizer, step_size=run.optimizer.resolved_step_size(budget)
    )
    rng = np.random.default_rng([run.seed, 1])
    return Checkpoint(
        params=params,
        adam=adam,
        rng_state=rng.bit_generator.state,
        iteration=0,
        training_mode=run.training.mode.value,
    )


def _restore_rng(state: dict) -> np.random.Generator:
    rng = np.random.default_rng()
    rng.bit_generator.state = state
    return rng


def _open_log(path: Path, keep: int):
    """Open the loss log for appending after its first ``keep`` lines.

    Lines past ``keep`` belong to iterations a resumed run recomputes.
    """
    path.parent.mkdir(parents=True, exist_ok=True)
    kept = ""
    if keep and path.exists():
        kept = "".join(path.read_text(encoding="utf-8").splitlines(keepends=True)[:keep])
    log = open(path, "w", encoding="utf-8")
    log.write(kept)
    return log


def train(
    run: RunConfig,
    store: ViewStore,
    checkpoint_path: str | Path | None = None,
    log_path: str | Path | None = None,
    resume: Checkpoint | None = None,
) -> Checkpoint:
    """Train until ``run.training.iterations`` iterations have completed.

    With ``resume`` the loop continues from the checkpoint's parameters,
    optimizer state, RNG state and iteration count, and continues the log after
    the checkpoint's iteration.
    """
    settings = run.training
    network = run.resolved_network()
    if network.image_size != store.manifest.image_size:
        raise ConfigurationError(
            f"network expects {network.image_size}px images, dataset has "
            f"{store.manifest.image_size}px"
        )
    if resume is not None:
        if resume.config != network:
            raise ConfigurationError("checkpoint network config differs from the run config")
        if resume.adam is None or resume.rng_state is None:
            raise ConfigurationError("checkpoint carries no optimizer or RNG state to resume from")
        ckpt = resume
    else:
        ckpt = initial_checkpoint(run)
    params, adam = ckpt.params, ckpt.adam
    rng = _restore_rng(ckpt.rng_state)
    start = ckpt.iteration

    log = None
    if log_path is not None:
        log = _open_log(Path(log_path), start if resume is not None else 0)
    pool = ThreadPoolExecutor(max_workers=settings.threads) if settings.threads > 1 else None
    mapper = pool.map if pool else map

    logger.info(
        "training %s from iteration %d to %d (batch %d, %d thread(s))",
        settings.mode.value,
        start,
        settings.iterations,
        settings.batch_size,
        settings.threads,
    )

    def snapshot(iteration: int, rng_state: dict | None = None) -> Checkpoint:
        return Checkpoint(
            params=params,
            adam=adam,
            rng_state=rng.bit_generator.state if rng_state is None else rng_state,
            iteration=iteration,
            training_mode=settings.mode.value,
        )

    try:
        for iteration in range(start + 1, settings.iterations + 1):
            # resuming a diagnostic checkpoint replays the failing batch
            rng_before = rng.bit_generator.state
            batch = sample_batch(store, run, rng)
            try:
                loss, grads = batch_loss(params, settings.mode, batch, mapper)
                if math.isfinite(loss):
                    adam_step(params, grads, adam)
            except NonFiniteError as exc:
                logger.warning("iteration %d: %s", iteration, exc)
                loss = math.nan
            if not math.isfinite(loss):
                diagnostic = None
                if checkpoint_path is not None:
                    diagnostic = f"{checkpoint_path}.diverged"
                    save_checkpoint(snapshot(iteration - 1, rng_before), diagnostic)
                logger.warning("non-finite loss at iteration %d", iteration)
                raise TrainingDivergedError(iteration, diagnostic)
            logger.debug("iteration %d loss %.6f", iteration, loss)
            if log is not None:
                log.write(format_log_line(iteration, loss))
            if (
                checkpoint_path is not None
                and settings.checkpoint_every
                and iteration % settings.checkpoint_every == 0
            ):
                save_checkpoint(snapshot(iteration), checkpoint_path)
    finally:
        if log is not None:
            log.close()
        if pool is not None:
            pool.shutdown()

    final = snapshot(max(start, settings.iterations))
    if checkpoint_path is not None:
        save_checkpoint(final, checkpoint_path)
    return final
