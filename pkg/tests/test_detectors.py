import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import ortho_group

from kdanomaly.detectors import GaussianStats, fit_gaussian_stats, mahalanobis_score, mse_center_score, shallow_scores
from kdanomaly.errors import ArgumentError, DimensionError, NumericError

from oracles import dense_mahalanobis

# mean 0, covariance exactly the identity
CROSS = np.sqrt(2.0) * np.array([[1, 0], [-1, 0], [0, 1], [0, -1]], dtype=float)


def test_two_point_example():
    stats = fit_gaussian_stats([[0, 0], [2, 0]])
    np.testing.assert_allclose(stats.mean, [1, 0])
    np.testing.assert_allclose(stats.cov, [[1, 0], [0, 0]])
    assert stats.eps == pytest.approx(1e-6)
    assert mahalanobis_score(stats, [1, 0]) == 0.0
    assert mahalanobis_score(stats, [2, 0]) == pytest.approx(1 / (1 + 1e-6))
    assert mahalanobis_score(stats, [1, 1]) == pytest.approx(1e6)


def test_identity_covariance_examples():
    full = fit_gaussian_stats(CROSS, "full")
    assert mse_center_score(full, [3, 4]) == pytest.approx(12.5)
    assert mahalanobis_score(full, [3, 4]) == pytest.approx(25 / (1 + full.eps), rel=1e-12)


def test_batch_and_single_agree():
    rng = np.random.default_rng(0)
    stats = fit_gaussian_stats(rng.normal(size=(50, 4)))
    z = rng.normal(size=(5, 4))
    batch = mahalanobis_score(stats, z)
    assert batch.shape == (5,)
    for row, s in zip(z, batch):
        assert mahalanobis_score(stats, row) == pytest.approx(s, rel=1e-12)


def test_matches_dense_oracle():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(40, 6)) @ rng.normal(size=(6, 6))
    stats = fit_gaussian_stats(x)
    for z in rng.normal(size=(10, 6)) * 3:
        assert mahalanobis_score(stats, z) == pytest.approx(dense_mahalanobis(x, z, stats.eps), rel=1e-8)


def test_zero_at_mean():
    x = np.random.default_rng(2).normal(size=(30, 5))
    stats = fit_gaussian_stats(x)
    assert mahalanobis_score(stats, stats.mean) == pytest.approx(0.0, abs=1e-12)
    assert mse_center_score(stats, stats.mean) == 0.0


def test_mse_rotation_invariant():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(30, 5))
    q = ortho_group.rvs(5, random_state=0)
    z = rng.normal(size=(8, 5))
    a = mse_center_score(fit_gaussian_stats(x), z)
    b = mse_center_score(fit_gaussian_stats(x @ q.T), z @ q.T)
    np.testing.assert_allclose(a, b, rtol=1e-10)


def test_diag_equals_full_for_diagonal_covariance():
    scales = np.array([0.5, 2.0, 3.0])
    x = np.concatenate([np.diag(scales), -np.diag(scales)])
    z = np.random.default_rng(4).normal(size=(6, 3))
    full = mahalanobis_score(fit_gaussian_stats(x, "full"), z)
    diag = mahalanobis_score(fit_gaussian_stats(x, "diag"), z)
    np.testing.assert_allclose(full, diag, rtol=1e-10)


def test_mode_mismatch_and_shapes():
    stats = fit_gaussian_stats(CROSS, "diag")
    with pytest.raises(ArgumentError):
        mahalanobis_score(stats, [0, 0], mode="full")
    with pytest.raises(DimensionError):
        mahalanobis_score(stats, [0, 0, 0])
    with pytest.raises(ArgumentError):
        fit_gaussian_stats(CROSS, "spherical")
    with pytest.raises(NumericError):
        fit_gaussian_stats([[np.nan, 0.0]])


def test_score_is_non_negative_on_degenerate_data():
    x = np.tile([1.0, 2.0, 3.0], (10, 1))
    stats = fit_gaussian_stats(x)
    assert mahalanobis_score(stats, [1, 2, 3]) == 0.0
    assert mahalanobis_score(stats, [1, 2, 4]) > 0


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_permutation_of_training_rows(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(20, 3))
    z = rng.normal(size=(4, 3))
    a = mahalanobis_score(fit_gaussian_stats(x), z)
    b = mahalanobis_score(fit_gaussian_stats(x[rng.permutation(20)]), z)
    np.testing.assert_allclose(a, b, rtol=1e-9)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_affine_invariance(seed):
    rng = np.random.default_rng(seed)
    d = 4
    x = rng.normal(size=(60, d)) * 2
    u = ortho_group.rvs(d, random_state=rng.integers(2**31))
    v = ortho_group.rvs(d, random_state=rng.integers(2**31))
    a = u @ np.diag(rng.uniform(0.8, 1.25, d)) @ v
    b = rng.normal(size=d)
    z = rng.normal(size=(5, d)) * 2
    s1 = mahalanobis_score(fit_gaussian_stats(x), z)
    s2 = mahalanobis_score(fit_gaussian_stats(x @ a.T + b), z @ a.T + b)
    np.testing.assert_allclose(s1, s2, rtol=1e-5)


def test_save_load_round_trip(tmp_path):
    stats = fit_gaussian_stats(np.random.default_rng(5).normal(size=(20, 3)))
    stats.save(tmp_path / "s.bin")
    back = GaussianStats.load(tmp_path / "s.bin")
    assert back.eps == stats.eps and back.mode == stats.mode and back.n == 20
    # tensors are stored as float32
    z = np.ones(3)
    assert mahalanobis_score(back, z) == pytest.approx(mahalanobis_score(stats, z), rel=1e-5)


def test_shallow_scores_dispatch():
    x = np.random.default_rng(6).normal(size=(20, 3))
    z = x[:4] + 5
    assert np.all(shallow_scores("mahalanobis_full", x, z) > shallow_scores("mahalanobis_full", x, x[:4]))
    assert shallow_scores("mse", x, z).shape == (4,)
    with pytest.raises(ArgumentError):
        shallow_scores("kd", x, z)
