import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dformer.errors import ConfigurationError, DimensionError, ParameterError
from dformer.losses import DICE_EPS, class_softmax, combined_loss, dice_score, one_hot
from dformer.tensor import Tensor, backward, finite_diff_oracle, relative_error


def probs_from(p1):
    """Two-class probability volume whose foreground channel is ``p1``."""
    p1 = np.asarray(p1, dtype=float)
    return Tensor(np.stack([1 - p1, p1]))


def scalar_loss(p1, labels, floor=1e-7, eps=DICE_EPS):
    """Plain-Python evaluation for a single two-class volume."""
    p1, labels = list(np.ravel(p1)), list(np.ravel(labels))
    n = len(p1)
    ce = 0.0
    for p, y in zip(p1, labels):
        ce += math.log(max(p if y == 1 else 1 - p, floor))
    ce /= 2 * n
    inter = sum(p for p, y in zip(p1, labels) if y == 1)
    dice = 2 * inter / (sum(p1) + sum(labels) + eps)
    return -(0.5 * ce + dice)


class TestCombinedLoss:
    def test_perfect_prediction(self):
        labels = np.array([[[1], [0]], [[0], [1]]])
        loss = combined_loss([Tensor(one_hot(labels, 2))], [labels]).item()
        assert loss == pytest.approx(-1.0, abs=1e-5)
        assert loss > -1.0

    def test_hand_computed_toy(self):
        labels = np.array([[[1], [0]], [[0], [1]]])
        p1 = np.array([[[0.8], [0.2]], [[0.8], [0.2]]])
        loss = combined_loss([probs_from(p1)], [labels]).item()
        assert loss == pytest.approx(scalar_loss(p1, labels), abs=1e-12)
        # frozen value of the same expression
        assert loss == pytest.approx(-0.27092607, abs=1e-8)

    def test_batch_is_mean(self, rng):
        labels = [rng.integers(0, 2, (2, 2, 2)) for _ in range(3)]
        p1 = [rng.uniform(0.05, 0.95, (2, 2, 2)) for _ in range(3)]
        batch = combined_loss([probs_from(p) for p in p1], labels).item()
        ref = np.mean([scalar_loss(p, y) for p, y in zip(p1, labels)])
        assert batch == pytest.approx(ref, abs=1e-12)

    def test_clamp_keeps_loss_finite(self):
        labels = np.ones((2, 1, 1), dtype=int)
        loss = combined_loss([probs_from(np.zeros((2, 1, 1)))], [labels]).item()
        assert np.isfinite(loss)
        assert loss == pytest.approx(-0.25 * math.log(1e-7), rel=1e-9)

    def test_background_excluded_from_dice(self):
        labels = np.zeros((2, 2, 1), dtype=int)
        # all background, predicted perfectly: CE is 0 and foreground Dice is 0
        assert combined_loss([Tensor(one_hot(labels, 2))], [labels]).item() == 0.0

    def test_three_classes(self, rng):
        labels = np.array([[[0, 1, 2, 2]]])
        loss = combined_loss([Tensor(one_hot(labels, 3))], [labels]).item()
        assert loss == pytest.approx(-1.0, abs=1e-5)

    def test_errors(self):
        with pytest.raises(DimensionError):
            combined_loss([probs_from(np.zeros((2, 2, 2)))], [np.zeros((2, 2, 1), int)])
        with pytest.raises(ConfigurationError):
            combined_loss([Tensor(np.ones((1, 2, 2, 2)))], [np.zeros((2, 2, 2), int)])
        with pytest.raises(DimensionError):
            combined_loss([], [])

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2 ** 31))
    def test_bounded_and_monotone(self, seed):
        r = np.random.default_rng(seed)
        labels = r.integers(0, 2, (2, 2, 2))
        labels.flat[0] = 1
        p1 = r.uniform(0.05, 0.95, (2, 2, 2))
        before = combined_loss([probs_from(p1)], [labels]).item()
        assert before >= -1.0
        # move part of the wrong mass of one voxel to its correct class
        v = int(r.integers(0, 8))
        p1.flat[v] += 0.5 * ((1.0 if labels.flat[v] == 1 else 0.0) - p1.flat[v])
        after = combined_loss([probs_from(p1)], [labels]).item()
        assert after < before

    def test_gradient_wrt_logits(self, rng):
        logits = Tensor(rng.standard_normal((3, 2, 2, 2)), requires_grad=True)
        labels = rng.integers(0, 3, (2, 2, 2))

        def f(_=None):
            return combined_loss([class_softmax(logits)], [labels])

        grads = backward(f())
        assert relative_error(grads[logits], finite_diff_oracle(f, logits)) < 1e-4

    def test_softmax_sums_to_one(self, rng):
        p = class_softmax(Tensor(rng.standard_normal((4, 3, 2, 2)))).data
        assert np.abs(p.sum(axis=0) - 1).max() < 1e-12


class TestDice:
    def test_identical(self, rng):
        m = rng.integers(0, 3, (4, 4, 4))
        m[0, 0, 0] = 1
        assert dice_score(m, m, 1) == 1.0

    def test_disjoint(self):
        a, b = np.zeros((2, 2, 2), int), np.zeros((2, 2, 2), int)
        a[0], b[1] = 1, 1
        assert dice_score(a, b, 1) == 0.0

    def test_subset(self):
        truth, pred = np.zeros((4, 4, 4), int), np.zeros((4, 4, 4), int)
        truth[:2, :2, :2] = 1
        pred[:1, :2, :2] = 1
        assert dice_score(pred, truth, 1) == pytest.approx(2 / 3, abs=1e-15)

    def test_both_empty(self):
        z = np.zeros((2, 2, 2), int)
        assert dice_score(z, z, 1) == 1.0

    def test_errors(self):
        z = np.zeros((2, 2, 2), int)
        with pytest.raises(ParameterError):
            dice_score(z, z, 2, num_classes=2)
        with pytest.raises(DimensionError):
            dice_score(z, np.zeros((2, 2, 1), int), 1)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2 ** 31))
    def test_symmetric_and_permutation_invariant(self, seed):
        r = np.random.default_rng(seed)
        a, b = r.integers(0, 3, (3, 3, 3)), r.integers(0, 3, (3, 3, 3))
        perm = r.permutation(27)
        pa, pb = a.reshape(-1)[perm].reshape(a.shape), b.reshape(-1)[perm].reshape(b.shape)
        for c in (1, 2):
            assert dice_score(a, b, c) == dice_score(b, a, c) == dice_score(pa, pb, c)
