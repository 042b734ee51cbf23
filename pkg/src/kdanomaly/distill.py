"""Student-teacher distillation and the regression anomaly score."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .autodiff import Tensor, mse_loss
from .datasets import LabeledDataset, patchify, require_normal_only
from .errors import ArgumentError, CompatibilityError, NumericError, StateError
from .nets import Model, build_model
from .pretrain import Teacher
from .rng import derive_seed, make_rng
from .training import fit


@dataclass
class DistillConfig:
    """Student optimisation settings. Inputs are never augmented."""

    lr: float = 1e-5
    epochs: int = 20
    batch_size: int = 64
    seed: int = 0
    augmentation: str = "none"

    def __post_init__(self):
        if self.augmentation != "none":
            raise ArgumentError(f"distillation does not support augmentation {self.augmentation!r}")
        if not self.lr > 0 or self.epochs < 0 or self.batch_size < 1:
            raise ArgumentError("need lr > 0, epochs >= 0 and batch_size >= 1")


@dataclass
class StudentTeacherPair:
    student: Model
    teacher: Teacher
    history: List[float] = field(default_factory=list)

    def __post_init__(self):
        if self.student.fingerprint != self.teacher.fingerprint:
            raise CompatibilityError("student and teacher architectures differ")
        if not self.teacher.model.frozen:
            raise StateError("the teacher must be frozen")

    @property
    def fingerprint(self) -> bytes:
        return self.teacher.fingerprint

    @property
    def input_shape(self):
        return self.teacher.model.input_shape

    def scores(self, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
        return kd_scores(self, images, batch_size)


def make_pair(teacher: Teacher, seed: int = 0) -> StudentTeacherPair:
    """Pair ``teacher`` with an independently initialised student."""
    model = teacher.model
    student = build_model(model.specs, model.input_shape, derive_seed(seed, "student"))
    return StudentTeacherPair(student, teacher)


def train_student(pair: StudentTeacherPair, normal_train: LabeledDataset, cfg: Optional[DistillConfig] = None
                  ) -> StudentTeacherPair:
    """Regress student outputs onto the frozen teacher's over normal training data.

    The loss is the mean squared error per coordinate; the teacher targets are
    computed once up front since the teacher never changes.
    """
    cfg = cfg or DistillConfig()
    require_normal_only(normal_train, "student training")
    teacher_hash = pair.teacher.model.param_hash()
    images = normal_train.images
    targets = pair.teacher.features(images)
    student = pair.student

    def batch_loss(idx):
        return mse_loss(student(Tensor(images[idx])), targets[idx])

    def evaluate():
        return float(np.mean((student.predict(images) - targets) ** 2))

    pair.history = fit(student.parameters(), batch_loss, len(images), cfg.epochs, cfg.batch_size, cfg.lr,
                       make_rng(cfg.seed, "distill-shuffle"), evaluate)
    if pair.teacher.model.param_hash() != teacher_hash:
        raise StateError("teacher parameters changed during distillation")
    return pair


def _check_finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NumericError("network produced non-finite outputs")


def kd_scores(pair: StudentTeacherPair, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """``||h(x) - f(x)||^2`` for each image, summed over the output dimension."""
    images = np.asarray(images, dtype=np.float32)
    if images.ndim == 3:
        images = images[None]
    teacher = pair.teacher.features(images)
    student = pair.student.predict(images, batch_size=batch_size)
    _check_finite(teacher, student)
    return np.sum((teacher - student) ** 2, axis=1)


def kd_score(pair: StudentTeacherPair, x: np.ndarray) -> float:
    """Score of a single ``[C, H, W]`` input."""
    x = np.asarray(x)
    if x.shape != tuple(pair.input_shape):
        raise ArgumentError(f"expected a single input of shape {pair.input_shape}, got {x.shape}")
    return float(kd_scores(pair, x[None])[0])


def aggregate_patch_scores(scores: Sequence[float]) -> float:
    """Image score from its patch scores: the maximum."""
    scores = np.asarray(list(scores), dtype=np.float64)
    if scores.size == 0:
        raise ArgumentError("cannot aggregate an empty list of patch scores")
    return float(scores.max())


def score_images_by_patches(pair: StudentTeacherPair, images: np.ndarray, patch: int, stride: int) -> np.ndarray:
    """Max patch score per image for a pair trained on ``patch``-sized crops."""
    patches, owner = patchify(images, patch, stride)
    per_patch = kd_scores(pair, patches)
    return np.array([aggregate_patch_scores(per_patch[owner == i]) for i in range(len(images))])
