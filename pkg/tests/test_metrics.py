import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kdanomaly.datasets import LabeledDataset
from kdanomaly.errors import ArgumentError, DegenerateVarianceError, NumericError
from kdanomaly.metrics import ProbeConfig, ScoreSet, auroc, linear_probe, midranks, pearson_corr

from oracles import direct_pearson, pairwise_auroc

scores = st.lists(st.integers(0, 6).map(float), min_size=1, max_size=25)


def test_auroc_examples():
    assert auroc([0.1, 0.2], [0.3, 0.4]) == 1.0
    assert auroc([0.3, 0.4], [0.1, 0.2]) == 0.0
    assert auroc([1.0, 1.0], [1.0]) == 0.5
    assert auroc([0.5, 0.1], [0.5]) == 0.75


def test_scoreset_validation():
    with pytest.raises(ArgumentError):
        ScoreSet([], [1.0])
    with pytest.raises(NumericError):
        ScoreSet([np.nan], [1.0])
    s = ScoreSet.from_targets([0.1, 0.9, 0.2], [0, 1, 0])
    assert s.anomalous.tolist() == [0.9]
    with pytest.raises(ArgumentError):
        ScoreSet.from_targets([0.1], [0, 1])


def test_midranks():
    assert midranks(np.array([3.0, 1.0, 3.0, 2.0])).tolist() == [3.5, 1.0, 3.5, 2.0]


@settings(max_examples=200, deadline=None)
@given(normal=scores, anomalous=scores)
def test_auroc_matches_pairwise_oracle(normal, anomalous):
    assert auroc(normal, anomalous) == pytest.approx(pairwise_auroc(normal, anomalous), abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(normal=scores, anomalous=scores)
def test_auroc_complement_and_monotone_invariance(normal, anomalous):
    a = auroc(normal, anomalous)
    assert a + auroc(anomalous, normal) == pytest.approx(1.0, abs=1e-12)
    f = lambda v: np.exp(np.asarray(v) / 3.0) * 2 - 7  # noqa: E731
    assert auroc(f(normal), f(anomalous)) == pytest.approx(a, abs=1e-12)


def test_auroc_is_order_free():
    rng = np.random.default_rng(0)
    n, a = rng.random(30), rng.random(20) + 0.2
    assert auroc(rng.permutation(n), rng.permutation(a)) == auroc(n, a)


@settings(max_examples=100, deadline=None)
@given(data=st.lists(st.tuples(st.floats(-100, 100), st.floats(-100, 100)), min_size=2, max_size=30))
def test_pearson_matches_direct_oracle(data):
    xs, ys = zip(*data)
    if np.ptp(xs) < 1e-6 or np.ptp(ys) < 1e-6:
        return
    assert pearson_corr(xs, ys) == pytest.approx(direct_pearson(xs, ys), abs=1e-9)


def test_pearson_examples():
    xs = np.arange(6.0)
    assert pearson_corr(xs, xs) == 1.0
    assert pearson_corr(xs, -3 * xs + 2) == -1.0
    with pytest.raises(DegenerateVarianceError):
        pearson_corr(xs, np.ones(6))
    with pytest.raises(ArgumentError):
        pearson_corr([1.0], [2.0])


class FeatureTeacher:
    """Stand-in teacher whose trunk features are a lookup by image content."""

    fingerprint = b"\x00" * 8

    def __init__(self, fn):
        self.fn = fn

    def trunk_features(self, images):
        return self.fn(images)


def _dataset(labels, k):
    labels = np.asarray(labels)
    images = np.zeros((len(labels), 1, 1, 1), dtype=np.float32)
    images[:, 0, 0, 0] = labels / k
    return LabeledDataset(images, labels, k)


def test_probe_on_one_hot_features():
    k = 3
    labels = np.tile(np.arange(k), 30)
    teacher = FeatureTeacher(lambda im: np.eye(k)[np.rint(im[:, 0, 0, 0] * k).astype(int)])
    res = linear_probe(teacher, _dataset(labels, k), _dataset(labels[:30], k), ProbeConfig(epochs=30))
    assert res.accuracy == 1.0
    assert res.num_classes == 3


def test_probe_on_uninformative_features_is_chance():
    rng = np.random.default_rng(0)
    train = _dataset(rng.integers(0, 2, 400), 2)
    test = _dataset(rng.integers(0, 2, 2000), 2)
    teacher = FeatureTeacher(lambda im: np.random.default_rng(len(im)).normal(size=(len(im), 5)))
    res = linear_probe(teacher, train, test, ProbeConfig(epochs=10))
    assert abs(res.accuracy - 0.5) < 0.05


def test_probe_label_sets_must_match():
    teacher = FeatureTeacher(lambda im: im.reshape(len(im), -1))
    with pytest.raises(ArgumentError):
        linear_probe(teacher, _dataset([0, 1, 2], 3), _dataset([0, 1], 3))
    with pytest.raises(ArgumentError):
        linear_probe(teacher, _dataset([0, 0], 2), _dataset([0], 2))
