"""AUROC, linear-probe accuracy and Pearson correlation."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .autodiff import Tensor, softmax_cross_entropy
from .datasets import LabeledDataset
from .errors import ArgumentError, DegenerateVarianceError, NumericError
from .nets import Dense, build_model
from .rng import derive_seed, make_rng
from .training import fit


@dataclass(frozen=True)
class ScoreSet:
    normal: np.ndarray
    anomalous: np.ndarray

    def __post_init__(self):
        for name in ("normal", "anomalous"):
            arr = np.asarray(getattr(self, name), dtype=np.float64).ravel()
            if arr.size == 0:
                raise ArgumentError(f"{name} scores are empty")
            if not np.all(np.isfinite(arr)):
                raise NumericError(f"{name} scores contain non-finite values")
            object.__setattr__(self, name, arr)

    @classmethod
    def from_targets(cls, scores, targets) -> "ScoreSet":
        scores, targets = np.asarray(scores), np.asarray(targets).astype(bool)
        if scores.shape != targets.shape:
            raise ArgumentError(f"{scores.shape} scores for {targets.shape} targets")
        return cls(scores[~targets], scores[targets])


def midranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks with tied values sharing the mean of their positions."""
    values = np.asarray(values)
    order = np.argsort(values, kind="mergesort")
    sorted_vals = values[order]
    starts = np.r_[0, np.flatnonzero(sorted_vals[1:] != sorted_vals[:-1]) + 1]
    ends = np.r_[starts[1:], len(values)]
    group_rank = (starts + ends + 1) / 2.0
    ranks = np.empty(len(values))
    ranks[order] = np.repeat(group_rank, ends - starts)
    return ranks


def auroc(scores: ScoreSet, anomalous=None) -> float:
    """Probability that an anomaly outscores a normal sample, ties counting half.

    Accepts a :class:`ScoreSet` or the two score arrays.
    """
    if not isinstance(scores, ScoreSet):
        scores = ScoreSet(scores, anomalous)
    n, m = len(scores.normal), len(scores.anomalous)
    ranks = midranks(np.concatenate([scores.normal, scores.anomalous]))
    u = ranks[n:].sum() - m * (m + 1) / 2.0
    return float(u / (n * m))


def pearson_corr(xs, ys) -> float:
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or len(x) < 2:
        raise ArgumentError("pearson_corr needs two 1-d arrays of equal length >= 2")
    dx, dy = x - x.mean(), y - y.mean()
    sxx, syy = (dx * dx).sum(), (dy * dy).sum()
    if sxx == 0 or syy == 0:
        raise DegenerateVarianceError("correlation undefined for a constant array")
    return float(np.clip((dx * dy).sum() / np.sqrt(sxx * syy), -1.0, 1.0))


@dataclass
class ProbeConfig:
    lr: float = 1e-2
    epochs: int = 50
    batch_size: int = 64
    seed: int = 0


@dataclass(frozen=True)
class ProbeResult:
    accuracy: float
    num_classes: int
    trunk_fingerprint: bytes

    def __post_init__(self):
        if not 0.0 <= self.accuracy <= 1.0:
            raise ArgumentError("accuracy must lie in [0, 1]")


def fit_linear_head(train_x: np.ndarray, train_y: np.ndarray, num_classes: int,
                    cfg: Optional[ProbeConfig] = None):
    """Softmax regression on fixed features; returns a predict function."""
    cfg = cfg or ProbeConfig()
    mu = train_x.mean(axis=0)
    sd = train_x.std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)
    xs = ((train_x - mu) / sd).astype(np.float32)
    head = build_model([Dense(num_classes)], (xs.shape[1],), derive_seed(cfg.seed, "probe-head"))

    def batch_loss(idx):
        return softmax_cross_entropy(head(Tensor(xs[idx])), train_y[idx])

    def evaluate():
        return softmax_cross_entropy(Tensor(head.predict(xs)), train_y).item()

    fit(head.parameters(), batch_loss, len(xs), cfg.epochs, cfg.batch_size, cfg.lr,
        make_rng(cfg.seed, "probe-shuffle"), evaluate)
    return lambda x: head.predict(((x - mu) / sd).astype(np.float32)).argmax(axis=1)


def linear_probe(teacher, train: LabeledDataset, test: LabeledDataset, cfg: Optional[ProbeConfig] = None
                 ) -> ProbeResult:
    """Test accuracy of a linear head trained on the teacher's frozen trunk features."""
    classes = np.unique(train.labels)
    if not np.array_equal(classes, np.unique(test.labels)):
        raise ArgumentError("train and test label sets differ")
    if len(classes) < 2:
        raise ArgumentError("a linear probe needs at least two classes")
    ytr = np.searchsorted(classes, train.labels)
    yte = np.searchsorted(classes, test.labels)
    predict = fit_linear_head(teacher.trunk_features(train.images), ytr, len(classes), cfg)
    accuracy = float(np.mean(predict(teacher.trunk_features(test.images)) == yte))
    return ProbeResult(accuracy, len(classes), teacher.fingerprint)
