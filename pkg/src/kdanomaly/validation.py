"""Input checks shared by the estimator wrappers."""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from .errors import ArgumentError, DimensionError, NumericError


def check_images(X, input_shape: Optional[Sequence[int]] = None, min_samples: int = 1) -> np.ndarray:
    """Return ``X`` as a float32 ``[N, C, H, W]`` batch in ``[0, 1]``.

    A ``[N, H, W]`` batch is promoted to a single channel.
    """
    X = np.asarray(X, dtype=np.float32)
    if X.ndim == 3:
        X = X[:, None]
    if X.ndim != 4:
        raise DimensionError(f"expected images shaped [N, C, H, W] or [N, H, W], got {X.shape}")
    if len(X) < min_samples:
        raise ArgumentError(f"need at least {min_samples} samples, got {len(X)}")
    if not np.all(np.isfinite(X)):
        raise NumericError("images contain non-finite values")
    if X.size and (X.min() < 0 or X.max() > 1):
        raise ArgumentError("pixel values must lie in [0, 1]")
    if input_shape is not None and tuple(X.shape[1:]) != tuple(input_shape):
        raise DimensionError(f"images have shape {X.shape[1:]}, estimator was fitted on {tuple(input_shape)}")
    return X


def check_features(Z, dim: Optional[int] = None, min_samples: int = 1) -> np.ndarray:
    """Return ``Z`` as a finite float64 ``[N, D]`` matrix."""
    Z = np.asarray(Z, dtype=np.float64)
    if Z.ndim != 2:
        raise DimensionError(f"expected a [N, D] feature matrix, got {Z.shape}")
    if len(Z) < min_samples:
        raise ArgumentError(f"need at least {min_samples} samples, got {len(Z)}")
    if not np.all(np.isfinite(Z)):
        raise NumericError("features contain non-finite values")
    if dim is not None and Z.shape[1] != dim:
        raise DimensionError(f"features have {Z.shape[1]} columns, estimator was fitted on {dim}")
    return Z


def check_contamination(value: float) -> float:
    if not 0.0 < value <= 0.5:
        raise ArgumentError(f"contamination must lie in (0, 0.5], got {value}")
    return float(value)
