"""scikit-learn compatible wrappers around teachers, students and detectors.

Scores follow the scikit-learn outlier convention: ``score_samples`` is
higher for more normal inputs, ``predict`` returns +1 for inliers and -1 for
outliers.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, OutlierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .datasets import NORMAL, LabeledDataset
from .detectors import fit_gaussian_stats, mahalanobis_score, mse_center_score
from .distill import DistillConfig, kd_scores, make_pair, train_student
from .errors import ArgumentError
from .nets import default_encoder
from .pretrain import AuxTask, pretrain
from .validation import check_contamination, check_features, check_images


def _normal_view(X, y) -> LabeledDataset:
    labels = np.zeros(len(X), np.int64) if y is None else np.asarray(y)
    if len(labels) != len(X):
        raise ArgumentError(f"{len(labels)} labels for {len(X)} images")
    classes, dense = np.unique(labels, return_inverse=True)
    return LabeledDataset(X, dense, len(classes), name="fit", role=NORMAL)


class _TeacherParams:
    """Parameters shared by estimators that pre-train a teacher."""

    def _fit_teacher(self, X, y):
        if self.task == "supervised_baseline":
            raise ArgumentError("the supervised baseline needs anomalies and is not available as a one-class estimator")
        if self.task == "classifier" and y is None:
            raise ArgumentError("the classifier task needs labels y")
        ds = _normal_view(X, y)
        task = AuxTask(self.task, epochs=self.epochs, lr=self.lr, batch_size=self.batch_size,
                       seed=self.random_state, sigma=self.sigma, temperature=self.temperature)
        return pretrain(self.task, ds, task, default_encoder(self.proj_dim)), ds


class TeacherFeatures(_TeacherParams, TransformerMixin, BaseEstimator):
    """Pre-train a teacher on normal images and expose its features.

    ``layer`` selects the projection output or the pooled trunk.
    """

    def __init__(self, task="rotnet", epochs=10, lr=1e-3, batch_size=64, sigma=0.1, temperature=0.5,
                 proj_dim=32, layer="projection", random_state=0):
        self.task = task
        self.epochs = epochs
        self.lr = lr
        self.batch_size = batch_size
        self.sigma = sigma
        self.temperature = temperature
        self.proj_dim = proj_dim
        self.layer = layer
        self.random_state = random_state

    def fit(self, X, y=None):
        if self.layer not in ("projection", "trunk"):
            raise ArgumentError(f"layer must be 'projection' or 'trunk', got {self.layer!r}")
        X = check_images(X)
        self.teacher_, _ = self._fit_teacher(X, y)
        self.input_shape_ = X.shape[1:]
        return self

    def transform(self, X):
        check_is_fitted(self, "teacher_")
        X = check_images(X, self.input_shape_)
        if self.layer == "trunk":
            return self.teacher_.trunk_features(X)
        return self.teacher_.features(X)


class KDAnomalyDetector(_TeacherParams, OutlierMixin, BaseEstimator):
    """One-class detector scoring inputs by student-teacher regression error."""

    def __init__(self, task="rotnet", epochs=10, lr=1e-3, batch_size=64, sigma=0.1, temperature=0.5,
                 proj_dim=32, distill_lr=1e-3, distill_epochs=20, contamination=0.1, random_state=0):
        self.task = task
        self.epochs = epochs
        self.lr = lr
        self.batch_size = batch_size
        self.sigma = sigma
        self.temperature = temperature
        self.proj_dim = proj_dim
        self.distill_lr = distill_lr
        self.distill_epochs = distill_epochs
        self.contamination = contamination
        self.random_state = random_state

    def fit(self, X, y=None):
        """Fit on normal images only; ``y`` is used solely by the classifier task."""
        contamination = check_contamination(self.contamination)
        X = check_images(X, min_samples=2)
        teacher, ds = self._fit_teacher(X, y)
        pair = make_pair(teacher, self.random_state)
        train_student(pair, ds, DistillConfig(lr=self.distill_lr, epochs=self.distill_epochs,
                                              batch_size=self.batch_size, seed=self.random_state))
        self.pair_ = pair
        self.input_shape_ = X.shape[1:]
        self.offset_ = float(np.quantile(self.score_samples(X), contamination))
        return self

    def anomaly_score(self, X):
        check_is_fitted(self, "pair_")
        return kd_scores(self.pair_, check_images(X, self.input_shape_))

    def score_samples(self, X):
        return -self.anomaly_score(X)

    def decision_function(self, X):
        return self.score_samples(X) - self.offset_

    def predict(self, X):
        return np.where(self.decision_function(X) < 0, -1, 1)


class GaussianAnomalyDetector(OutlierMixin, BaseEstimator):
    """Distance-to-normal detector on feature vectors.

    ``metric`` is ``mse``, ``mahalanobis_diag`` or ``mahalanobis_full``.
    Combine with :class:`TeacherFeatures` in a pipeline to work on images.
    """

    def __init__(self, metric="mahalanobis_full", contamination=0.1):
        self.metric = metric
        self.contamination = contamination

    def fit(self, X, y=None):
        if self.metric not in ("mse", "mahalanobis_diag", "mahalanobis_full"):
            raise ArgumentError(f"unknown metric {self.metric!r}")
        contamination = check_contamination(self.contamination)
        X = check_features(X)
        mode = "full" if self.metric == "mahalanobis_full" else "diag"
        self.stats_ = fit_gaussian_stats(X, mode)
        self.offset_ = float(np.quantile(self.score_samples(X), contamination))
        return self

    def anomaly_score(self, X):
        check_is_fitted(self, "stats_")
        X = check_features(X, self.stats_.dim)
        if self.metric == "mse":
            return mse_center_score(self.stats_, X)
        return mahalanobis_score(self.stats_, X)

    def score_samples(self, X):
        return -self.anomaly_score(X)

    def decision_function(self, X):
        return self.score_samples(X) - self.offset_

    def predict(self, X):
        return np.where(self.decision_function(X) < 0, -1, 1)
