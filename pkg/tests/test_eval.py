import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mld import autoencoder as ae
from mld.diffusion import DiffusionConfig
from mld.errors import ShapeError
from mld.eval import (GaussianStats, TinyClassifier, agreement_rate, conditional_coherence, fmd,
                      frechet_distance, joint_coherence, robustness_scan, train_classifier, weakly_decreasing)
from mld.latent import ModalitySpec
from mld.nn import init_mlp


def stats(mean, cov):
    return GaussianStats(np.atleast_1d(np.asarray(mean, float)), np.atleast_2d(np.asarray(cov, float)))


def test_frechet_closed_forms():
    assert frechet_distance(stats(0, 1), stats(0, 1)) == pytest.approx(0, abs=1e-8)
    assert frechet_distance(stats(0, 1), stats(1, 1)) == pytest.approx(1, abs=1e-8)
    assert frechet_distance(stats(0, 1), stats(0, 4)) == pytest.approx(1, abs=1e-8)


def test_frechet_diagonal_closed_form():
    a = stats([1, 2, 3], np.diag([1.0, 4.0, 9.0]))
    b = stats([0, 2, 5], np.diag([4.0, 4.0, 1.0]))
    expected = 1 + 0 + 4 + (1 - 2) ** 2 + 0 + (3 - 1) ** 2
    assert frechet_distance(a, b) == pytest.approx(expected, abs=1e-8)


def random_spd(rng, d):
    a = rng.normal(size=(d, d))
    return a @ a.T + 0.1 * np.eye(d)


@settings(max_examples=30)
@given(st.integers(1, 6), st.integers(0, 2**32 - 1))
def test_frechet_symmetric_nonnegative(d, seed):
    rng = np.random.default_rng(seed)
    a = stats(rng.normal(size=d), random_spd(rng, d))
    b = stats(rng.normal(size=d), random_spd(rng, d))
    ab, ba = frechet_distance(a, b), frechet_distance(b, a)
    assert ab == pytest.approx(ba, rel=1e-8, abs=1e-8)
    assert ab >= -1e-8
    assert abs(frechet_distance(a, a)) < 1e-8


def test_frechet_singular_covariance_is_finite():
    a = stats([0, 0], [[1, 1], [1, 1]])
    b = stats([0, 0], [[1, 0], [0, 0]])
    assert np.isfinite(frechet_distance(a, b))


def test_frechet_dimension_mismatch():
    with pytest.raises(ShapeError):
        frechet_distance(stats([0, 0], np.eye(2)), stats(0, 1))


def test_gaussian_stats_needs_two_rows():
    with pytest.raises(ShapeError):
        GaussianStats.of(np.zeros((1, 3)))


class Fixed:
    """Classifier stand-in returning preset predictions."""

    def __init__(self, preds):
        self.preds = np.asarray(preds)

    def predict(self, x):
        return self.preds


def test_coherence_edge_cases():
    assert conditional_coherence(Fixed([2, 2, 2]), None, [2, 2, 2]) == 100.0
    assert conditional_coherence(Fixed([1]), None, [0]) == 0.0
    assert joint_coherence([Fixed([0, 1]), Fixed([0, 2])], [None, None]) == 50.0
    assert agreement_rate([[1, 2, 3], [1, 2, 0]]) == pytest.approx(200 / 3)
    assert agreement_rate([[1, 2], [1, 2]], labels=[1, 0]) == 50.0
    with pytest.raises(ShapeError):
        conditional_coherence(Fixed([]), None, [])
    with pytest.raises(ShapeError):
        agreement_rate(np.zeros((2, 0)))


@given(st.lists(st.integers(0, 3), min_size=1, max_size=40), st.randoms())
def test_coherence_in_range_and_order_invariant(labels, rnd):
    preds = [(l + (i % 2)) % 4 for i, l in enumerate(labels)]
    order = list(range(len(labels)))
    rnd.shuffle(order)
    c = conditional_coherence(Fixed(preds), None, labels)
    assert 0 <= c <= 100
    shuffled = conditional_coherence(Fixed([preds[i] for i in order]), None, [labels[i] for i in order])
    assert c == shuffled


def test_uniform_predictions_joint_chance():
    rng = np.random.default_rng(0)
    n, K = 200_000, 4
    rate = agreement_rate(rng.integers(0, K, size=(2, n)))
    # sum_k (1/K)^2 * K = 1/K
    assert rate == pytest.approx(100 / K, abs=4 * 100 * math.sqrt(0.25 * 0.75 / n))


def blobs(rng, n, K, d=2, spread=0.2):
    centers = 3 * rng.normal(size=(K, d))
    labels = rng.integers(0, K, n)
    return centers[labels] + spread * rng.normal(size=(n, d)), labels


def test_classifier_separable_two_class():
    rng = np.random.default_rng(0)
    x = np.concatenate([rng.normal(-2, 0.3, size=(100, 2)), rng.normal(2, 0.3, size=(100, 2))])
    y = np.repeat([0, 1], 100)
    clf = train_classifier(x, y, 2, epochs=30, seed=0)
    assert clf.accuracy(x, y) == 1.0


def test_classifier_shuffled_labels_near_chance():
    rng = np.random.default_rng(1)
    x, y = blobs(rng, 2000, 4)
    clf = train_classifier(x[:1000], rng.permutation(y[:1000]), 4, epochs=20, seed=0)
    # labels independent of the inputs: any fixed rule scores 1/K in expectation
    acc = clf.accuracy(x[1000:], rng.permutation(y[1000:]))
    assert abs(acc - 0.25) < 4 * math.sqrt(0.25 * 0.75 / 1000)


def test_classifier_single_class():
    x = np.random.default_rng(0).normal(size=(20, 3))
    clf = train_classifier(x, np.zeros(20, int), 1, epochs=1)
    assert clf.accuracy(x, np.zeros(20)) == 1.0
    assert clf.embed(x).shape == (20, 32)


def test_fmd_identical_sets_zero():
    rng = np.random.default_rng(0)
    clf = TinyClassifier(init_mlp([3, 5, 2], rng), 2)
    x = rng.normal(size=(50, 3))
    assert abs(fmd(clf, x, x)) < 1e-8


def test_weakly_decreasing():
    assert weakly_decreasing([5, 4, 4, 3])
    assert weakly_decreasing([5, 6, 4, 5, 3], max_violations=2)
    assert not weakly_decreasing([1, 2, 3, 4])
    assert weakly_decreasing([5, 5.5, 4], tol=1.0, max_violations=0)


def test_robustness_scan_endpoints():
    rng = np.random.default_rng(0)
    K, n = 4, 2000
    x, labels = blobs(rng, n, K, d=3, spread=0.1)
    spec = ModalitySpec("b", 3, 2)
    pair = ae.train_autoencoder(spec, x, epochs=40, lr=3e-3, seed=0)
    norm = ae.fit_normalizer(pair.encoder, x[:128])
    enc = ae.JointEncoder([pair], [norm])
    clf = train_classifier(x, labels, K, epochs=20, seed=0)
    cfg = DiffusionConfig()
    grid = [0.0, 0.2, 0.4, 0.6, 0.8, 1.0]
    scan = robustness_scan(enc, [clf], [x], labels, grid, cfg, np.random.default_rng(1))
    assert scan.shape == (len(grid), 1)
    assert scan[0, 0] == 100.0 * clf.accuracy(ae.decode(pair, norm, ae.encode(pair, norm, x)), labels)
    assert scan[0, 0] > 90
    # at t = T the latent is essentially pure noise
    se = 100 * math.sqrt((1 / K) * (1 - 1 / K) / n)
    assert abs(scan[-1, 0] - 100 / K) < 3 * se
    assert weakly_decreasing(scan[:, 0], tol=3 * se)
