"""Long training runs checking that the method comparisons come out the right way round.

Skipped unless VIEWFLOW_RUN_SLOW=1; each run takes minutes to tens of minutes.
"""

import os
import sys
from pathlib import Path

import numpy as np
import pytest

# Ensure project root on path
sys.path.append(str(Path(__file__).resolve().parents[1]))

from viewflow.config import RunConfig, TrainingMode, TrainingSettings, configured_threads
from viewflow.dataset import ViewStore, generate_dataset
from viewflow.evaluation import NetworkSynthesizer, confusion_matrix, evaluate
from viewflow.network import NetworkConfig
from viewflow.optim import AdamSettings
from viewflow.trainer import train

pytestmark = [
    pytest.mark.slow,
    pytest.mark.skipif(os.getenv("VIEWFLOW_RUN_SLOW") != "1", reason="set VIEWFLOW_RUN_SLOW=1"),
]

BUDGET = 10_000
EVAL_TUPLES = 2_000


@pytest.fixture(scope="module")
def store(tmp_path_factory):
    out = tmp_path_factory.mktemp("sprites")
    generate_dataset(seed=0, instance_count=200, size=32, out_dir=out, workers=configured_threads())
    return ViewStore(out)


@pytest.fixture(scope="module")
def trained(store, tmp_path_factory):
    cache = {}
    logs = tmp_path_factory.mktemp("logs")

    def get(mode, iterations=BUDGET):
        key = (mode, iterations)
        if key not in cache:
            run = RunConfig(
                seed=0,
                network=NetworkConfig.tiny(),
                optimizer=AdamSettings(learning_rate=5e-4, step_fraction=0.5),
                training=TrainingSettings(
                    mode=mode,
                    iterations=iterations,
                    batch_size=16,
                    checkpoint_every=0,
                    threads=configured_threads(),
                ),
            )
            log = logs / f"{mode.value}-{iterations}.log"
            cache[key] = (train(run, store, log_path=log), log)
        return cache[key]

    return get


def _test_l1(ckpt, store):
    return evaluate(NetworkSynthesizer(ckpt), store, tuples=EVAL_TUPLES, seed=0).overall_l1


def test_training_halves_the_loss(trained):
    _, log = trained(TrainingMode.SingleFlow, 2_000)
    losses = [float(line.split("\t")[1]) for line in log.read_text().splitlines()]
    assert np.mean(losses[-50:]) <= 0.5 * losses[0]


def test_flow_beats_direct_pixel_generation(trained, store):
    flow, _ = trained(TrainingMode.SingleFlow)
    pixels, _ = trained(TrainingMode.SinglePixels)
    assert _test_l1(flow, store) <= _test_l1(pixels, store)


def test_two_views_beat_one(trained, store):
    single, _ = trained(TrainingMode.SingleFlow)
    multi, _ = trained(TrainingMode.MultiFlow)
    assert _test_l1(multi, store) <= _test_l1(single, store)


def test_small_rotations_are_easier(trained, store):
    flow, _ = trained(TrainingMode.SingleFlow)
    matrix = confusion_matrix(NetworkSynthesizer(flow), store, samples_per_cell=5, seed=0)
    assert matrix.cell_mean(max_abs_delta=40) < matrix.cell_mean()


def test_mask_head_learns_the_silhouettes(trained, store):
    mask, _ = trained(TrainingMode.Mask, 5_000)
    report = evaluate(NetworkSynthesizer(mask), store, tuples=EVAL_TUPLES, seed=0)
    assert report.pixel_accuracy >= 0.95
