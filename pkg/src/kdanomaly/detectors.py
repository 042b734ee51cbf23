"""Gaussian detectors on teacher features: distance to mean and Mahalanobis."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from .errors import ArgumentError, DimensionError, NumericError
from .nets import read_bundle, write_bundle

MODES = ("full", "diag")


@dataclass(frozen=True)
class GaussianStats:
    """Mean and (population) covariance of normal features.

    ``cov`` is ``[D, D]`` in full mode and the vector of variances in diag
    mode.  ``eps`` is added to the diagonal before inversion.
    """

    mode: str
    mean: np.ndarray
    cov: np.ndarray
    eps: float
    n: int
    _factor: Optional[tuple] = field(default=None, repr=False, compare=False)

    @property
    def dim(self) -> int:
        return len(self.mean)

    @property
    def trace(self) -> float:
        return float(np.trace(self.cov) if self.mode == "full" else self.cov.sum())

    @property
    def regularized(self) -> np.ndarray:
        if self.mode == "full":
            return self.cov + self.eps * np.eye(self.dim)
        return self.cov + self.eps

    def save(self, path) -> None:
        write_bundle(path, {"mean": self.mean, "cov": self.cov},
                     {"kind": "gaussian_stats", "mode": self.mode, "eps": repr(self.eps), "n": self.n})

    @classmethod
    def load(cls, path) -> "GaussianStats":
        _, tensors, prov = read_bundle(path)
        if prov.get("kind") != "gaussian_stats":
            raise ArgumentError(f"{path} does not hold Gaussian statistics")
        mean = tensors["mean"].astype(np.float64)
        cov = tensors["cov"].astype(np.float64)
        return _with_factor(prov["mode"], mean, cov, float(prov["eps"]), int(prov["n"]))


def _with_factor(mode, mean, cov, eps, n) -> GaussianStats:
    stats = GaussianStats(mode, mean, cov, eps, n)
    reg = stats.regularized
    if mode == "full":
        try:
            factor = cho_factor(reg, lower=True, check_finite=True)
        except (LinAlgError, ValueError) as exc:
            raise NumericError(f"covariance is not positive definite even after regularisation: {exc}") from None
    else:
        if not np.all(reg > 0):
            raise NumericError("non-positive variance after regularisation")
        factor = (1.0 / reg,)
    object.__setattr__(stats, "_factor", factor)
    return stats


def fit_gaussian_stats(features, mode: str = "full") -> GaussianStats:
    """Fit mean and covariance to ``features`` of shape ``[N, D]``."""
    if mode not in MODES:
        raise ArgumentError(f"mode must be one of {MODES}, got {mode!r}")
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or len(x) < 1:
        raise DimensionError(f"features must be a non-empty [N, D] array, got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise NumericError("features contain non-finite values")
    mean = x.mean(axis=0)
    centered = x - mean
    if mode == "full":
        cov = centered.T @ centered / len(x)
        cov = 0.5 * (cov + cov.T)
        trace = np.trace(cov)
    else:
        cov = (centered * centered).mean(axis=0)
        trace = cov.sum()
    eps = 1e-6 * max(trace / x.shape[1], 1.0)
    return _with_factor(mode, mean, cov, float(eps), len(x))


def _centered(stats: GaussianStats, z) -> tuple:
    z = np.asarray(z, dtype=np.float64)
    single = z.ndim == 1
    z2 = z[None] if single else z
    if z2.ndim != 2 or z2.shape[1] != stats.dim:
        raise DimensionError(f"expected features of dimension {stats.dim}, got shape {z.shape}")
    return z2 - stats.mean, single


def mse_center_score(stats: GaussianStats, z):
    """``||z - mu||^2 / D`` for one vector or each row of a batch."""
    d, single = _centered(stats, z)
    s = (d * d).mean(axis=1)
    return float(s[0]) if single else s


def mahalanobis_score(stats: GaussianStats, z, mode: Optional[str] = None):
    """Squared Mahalanobis distance ``(z-mu)^T (S + eps I)^{-1} (z-mu)``."""
    if mode is not None and mode != stats.mode:
        raise ArgumentError(f"statistics were fitted in '{stats.mode}' mode, not '{mode}'")
    d, single = _centered(stats, z)
    if stats.mode == "full":
        s = np.einsum("ij,ij->i", d, cho_solve(stats._factor, d.T).T)
    else:
        s = (d * d * stats._factor[0]).sum(axis=1)
    s = np.maximum(s, 0.0)
    return float(s[0]) if single else s


DETECTORS = ("kd", "mse", "mahalanobis_diag", "mahalanobis_full")


def shallow_scores(detector: str, train_features: np.ndarray, test_features: np.ndarray) -> np.ndarray:
    """Fit on normal training features and score test features with one detector."""
    if detector == "mse":
        return mse_center_score(fit_gaussian_stats(train_features, "diag"), test_features)
    if detector in ("mahalanobis_diag", "mahalanobis_full"):
        mode = detector.rsplit("_", 1)[1]
        return mahalanobis_score(fit_gaussian_stats(train_features, mode), test_features)
    raise ArgumentError(f"unknown shallow detector {detector!r}")
