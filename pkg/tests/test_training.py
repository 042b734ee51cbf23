import numpy as np
import pytest

from kdanomaly.autodiff import Tensor, mse_loss
from kdanomaly.errors import ArgumentError, StateError
from kdanomaly.nets import Dense, build_model
from kdanomaly.training import fit


def regression(seed=0):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(64, 3)).astype(np.float32)
    y = (x @ np.array([[1.0], [-2.0], [0.5]])).astype(np.float32)
    model = build_model([Dense(1)], (3,), seed=0)

    def batch_loss(idx):
        return mse_loss(model(Tensor(x[idx])), y[idx])

    def evaluate():
        return float(np.mean((model.predict(x) - y) ** 2))

    return model, batch_loss, evaluate


def test_history_and_convergence():
    model, loss, ev = regression()
    hist = fit(model.parameters(), loss, 64, 40, 16, 5e-2, np.random.default_rng(0), ev)
    assert len(hist) == 41
    assert hist[-1] < 1e-3 * hist[0]


def test_zero_epochs_only_evaluates():
    model, loss, ev = regression()
    before = model.param_hash()
    assert fit(model.parameters(), loss, 64, 0, 16, 0.1, np.random.default_rng(0), ev) == [ev()]
    assert model.param_hash() == before


def test_min_batch_skips_all_updates():
    model, loss, ev = regression()
    before = model.param_hash()
    fit(model.parameters(), loss, 64, 2, 16, 0.1, np.random.default_rng(0), ev, min_batch=32)
    assert model.param_hash() == before


def test_same_rng_same_result():
    a, la, ea = regression()
    b, lb, eb = regression()
    fit(a.parameters(), la, 64, 3, 8, 1e-2, np.random.default_rng(5), ea)
    fit(b.parameters(), lb, 64, 3, 8, 1e-2, np.random.default_rng(5), eb)
    assert a.param_hash() == b.param_hash()


def test_argument_and_state_checks():
    model, loss, ev = regression()
    with pytest.raises(ArgumentError):
        fit(model.parameters(), loss, 64, 1, 0, 0.1, np.random.default_rng(0), ev)
    with pytest.raises(ArgumentError):
        fit(model.parameters(), loss, 64, -1, 8, 0.1, np.random.default_rng(0), ev)
    model.freeze()
    with pytest.raises(StateError):
        fit(model.parameters(), loss, 64, 1, 8, 0.1, np.random.default_rng(0), ev)
