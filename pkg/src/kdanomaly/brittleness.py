"""Brittleness diagnostic: input-gradient norm over output-difference spread."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tape, Tensor, mul, sub, tsum
from .datasets import LabeledDataset
from .distill import StudentTeacherPair
from .errors import ArgumentError, DegenerateVarianceError, NumericError


@dataclass(frozen=True)
class BrittlenessReport:
    numerator: float
    denominator: float
    score: float
    n: int
    stop_teacher: bool


def _as_batch(pair: StudentTeacherPair, x) -> np.ndarray:
    x = np.asarray(x.images if isinstance(x, LabeledDataset) else x)
    if x.shape[1:] != tuple(pair.input_shape):
        raise ArgumentError(f"expected inputs of shape [N, {pair.input_shape}], got {x.shape}")
    return x.astype(np.float64)


def input_gradients(pair: StudentTeacherPair, x, stop_teacher: bool = True) -> np.ndarray:
    """Gradient of ``||h(x_i) - f(x_i)||^2`` with respect to each input ``x_i``.

    The batch is pushed through the tape in one pass.  Each loss term depends
    only on its own input (no layer mixes samples), so the gradient of the
    summed loss with respect to ``x_i`` is exactly the per-sample gradient.
    """
    x = _as_batch(pair, x)
    leaf = Tensor(x, requires_grad=True, dtype=np.float64)
    with Tape() as tape:
        if stop_teacher:
            target = Tensor(pair.teacher.model.forward(Tensor(x, dtype=np.float64)).data, dtype=np.float64)
        else:
            target = pair.teacher.model.forward(leaf)
        diff = sub(pair.student.forward(leaf), target)
        loss = tsum(mul(diff, diff))
    tape.backward(loss)
    grad = leaf.grad
    if grad is None:
        grad = np.zeros_like(x)
    if not np.all(np.isfinite(grad)):
        raise NumericError("non-finite input gradient")
    return grad


def input_gradient(pair: StudentTeacherPair, x, stop_teacher: bool = True) -> np.ndarray:
    """Input gradient for a single ``[C, H, W]`` sample."""
    x = np.asarray(x)
    if x.shape != tuple(pair.input_shape):
        raise ArgumentError(f"expected a single input of shape {pair.input_shape}, got {x.shape}")
    return input_gradients(pair, x[None], stop_teacher)[0]


def brittleness_score(pair: StudentTeacherPair, normal_train, stop_teacher: bool = True,
                      batch_size: int = 128) -> BrittlenessReport:
    """Mean per-sample input-gradient L2 norm divided by the trace of the
    population covariance of the output differences ``h(x) - f(x)``."""
    x = _as_batch(pair, normal_train)
    if len(x) < 2:
        raise ArgumentError("brittleness needs at least two samples")
    norms = []
    for start in range(0, len(x), batch_size):
        g = input_gradients(pair, x[start:start + batch_size], stop_teacher)
        norms.append(np.sqrt((g.reshape(len(g), -1) ** 2).sum(axis=1)))
    numerator = float(np.concatenate(norms).mean())
    diffs = pair.teacher.features(x) - pair.student.predict(x)
    denominator = float(diffs.var(axis=0).sum())
    # constant differences leave only rounding noise in the variance
    if denominator == 0.0 or denominator <= 1e-12 * float(np.mean(diffs ** 2)):
        raise DegenerateVarianceError("student-teacher differences have (near) zero variance")
    return BrittlenessReport(numerator, denominator, numerator / denominator, len(x), stop_teacher)
