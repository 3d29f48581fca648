import math
import sys
from pathlib import Path

import numpy as np
import pytest

# Ensure project root on path
sys.path.append(str(Path(__file__).resolve().parents[1]))

from viewflow.errors import ConfigurationError, DataError, UsageError
from viewflow.gradcheck import numeric_grad_at, relative_error
from viewflow.losses import cross_entropy_loss, l1_loss

PROBES = 1000


def _probe(rng, loss, tensor, analytic, count=PROBES):
    worst = 0.0
    for _ in range(count):
        index = tuple(int(rng.integers(d)) for d in tensor.shape)
        numeric = numeric_grad_at(loss, tensor, index)
        worst = max(worst, relative_error(analytic[index], numeric, floor=1e-3))
    assert worst < 1e-4


def test_l1_examples():
    loss, grad = l1_loss(np.array([1.0, 2.0]), np.array([1.0, 2.0]))
    assert loss == 0.0 and not grad.any()
    loss, _ = l1_loss(np.array([0.0, 0.0]), np.array([1.0, 3.0]))
    assert loss == 2.0
    _, grad = l1_loss(np.array([2.0]), np.array([1.0]))
    assert grad.tolist() == [1.0]


def test_l1_mask_restricts_the_mean():
    prediction = np.zeros((1, 3, 1, 2))
    target = np.zeros((1, 3, 1, 2))
    target[..., 1] = 4.0
    mask = np.array([[[[1.0, 0.0]]]])
    loss, grad = l1_loss(prediction, target, mask)
    assert loss == 0.0
    assert not grad.any()
    loss, grad = l1_loss(prediction, target, 1.0 - mask)
    assert loss == 4.0
    assert np.allclose(grad[..., 1], -1.0 / 3.0)


def test_l1_empty_mask_is_an_error():
    with pytest.raises(UsageError):
        l1_loss(np.zeros((1, 3, 2, 2)), np.ones((1, 3, 2, 2)), np.zeros((1, 1, 2, 2)))
    with pytest.raises(ConfigurationError):
        l1_loss(np.zeros(3), np.zeros(4))


@pytest.mark.parametrize("masked", [False, True])
def test_l1_gradient_matches_finite_differences(masked):
    rng = np.random.default_rng(0)
    target = rng.uniform(size=(2, 3, 8, 8))
    # every residual at least 0.05 away from the |x| kink
    offset = rng.uniform(0.05, 0.5, size=target.shape) * rng.choice([-1.0, 1.0], size=target.shape)
    prediction = target + offset
    mask = (rng.uniform(size=(2, 1, 8, 8)) > 0.3).astype(np.float64) if masked else None
    _, grad = l1_loss(prediction, target, mask)
    _probe(rng, lambda: l1_loss(prediction, target, mask)[0], prediction, grad)


def test_cross_entropy_examples():
    loss, grad = cross_entropy_loss(np.array([0.0]), np.array([1.0]))
    assert math.isclose(loss, math.log(2.0), rel_tol=1e-12)
    assert grad.tolist() == [-0.5]
    loss, _ = cross_entropy_loss(np.array([1000.0]), np.array([1.0]))
    assert loss < 1e-12
    loss, _ = cross_entropy_loss(np.array([-1000.0]), np.array([1.0]))
    assert math.isclose(loss, 1000.0)


def test_cross_entropy_rejects_soft_labels():
    with pytest.raises(DataError):
        cross_entropy_loss(np.zeros(2), np.array([0.0, 0.5]))


def test_cross_entropy_gradient_matches_finite_differences():
    rng = np.random.default_rng(1)
    logits = rng.normal(scale=3.0, size=(2, 1, 8, 8))
    labels = (rng.uniform(size=logits.shape) > 0.5).astype(np.float64)
    _, grad = cross_entropy_loss(logits, labels)
    _probe(rng, lambda: cross_entropy_loss(logits, labels)[0], logits, grad)
