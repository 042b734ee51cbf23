import math

import numpy as np
import pytest

from kdanomaly.autodiff import Adam, Tensor
from kdanomaly.datasets import LabeledDataset, SyntheticConfig, build_split, generate_synthetic
from kdanomaly.errors import ArgumentError, HygieneError, StateError
from kdanomaly.nets import default_encoder
from kdanomaly.pretrain import (
    AuxTask,
    Teacher,
    make_rotnet_batch,
    nt_xent_loss,
    pretrain,
    pretrain_autoencoder,
    pretrain_classifier,
    pretrain_dae,
    pretrain_rotnet,
    pretrain_simclr,
    pretrain_supervised_baseline,
    random_teacher,
    simclr_views,
)

SMALL = default_encoder(proj_dim=8, widths=(4, 8, 8))


def normal_view(families, n=40, seed=0, noise=0.05, anomaly=None):
    """Normal training view of a synthetic set; ``anomaly`` names the held-out class index."""
    ds = generate_synthetic(SyntheticConfig(classes=families, samples_per_class=n, seed=seed, noise=noise))
    if anomaly is None:
        plan = build_split(ds, "unimodal", 0, test_fraction=0.2, seed=seed)
    else:
        plan = build_split(ds, "multimodal", anomaly, test_fraction=0.2, seed=seed, anomaly_pool_fraction=0.5)
    return ds, plan


def trunk_params(teacher):
    n = len(teacher.model.specs) - 1
    return {k: v.data.copy() for k, v in teacher.model.params.items() if int(k.split(".")[0]) < n}


def within_transient(history, tol=0.05):
    return all(b <= a * (1 + tol) for a, b in zip(history, history[1:]))


# -- task validation ---------------------------------------------------------------

def test_task_validation():
    with pytest.raises(ArgumentError):
        AuxTask("jigsaw")
    with pytest.raises(ArgumentError):
        AuxTask("dae", sigma=0.0)
    with pytest.raises(ArgumentError):
        AuxTask("simclr", temperature=0.0)
    with pytest.raises(ArgumentError):
        AuxTask("simclr", augmentations=("colour_jitter",))


# -- classifier ----------------------------------------------------------------------

@pytest.fixture(scope="module")
def two_class():
    ds = generate_synthetic(SyntheticConfig(classes=["bar_top", "disc"], samples_per_class=40, seed=0))
    return ds.as_auxiliary()


def test_classifier_separable(two_class):
    t = pretrain_classifier(two_class, AuxTask("classifier", epochs=5, lr=1e-2, batch_size=16, seed=0), SMALL)
    assert t.train_accuracy >= 0.95
    assert t.model.output_shape == (8,)
    assert t.model.frozen


def test_classifier_zero_epochs_keeps_init(two_class):
    a = pretrain_classifier(two_class, AuxTask("classifier", epochs=0, seed=3), SMALL)
    b = pretrain_classifier(two_class, AuxTask("classifier", epochs=0, seed=3), SMALL)
    init = a.aux_model
    for k, v in trunk_params(a).items():
        assert np.array_equal(v, init.params[k].data)
    assert a.model.param_hash() == b.model.param_hash()


def test_classifier_deterministic(two_class):
    a = pretrain_classifier(two_class, AuxTask("classifier", epochs=2, seed=1), SMALL)
    b = pretrain_classifier(two_class, AuxTask("classifier", epochs=2, seed=1), SMALL)
    assert a.model.param_hash() == b.model.param_hash()
    assert a.history == b.history


def test_classifier_single_class():
    ds = LabeledDataset(np.zeros((4, 1, 16, 16)), [0] * 4, 1).as_auxiliary()
    with pytest.raises(ArgumentError):
        pretrain_classifier(ds, AuxTask("classifier", epochs=1), SMALL)


def test_projection_head_is_fresh_and_frozen(two_class):
    t = pretrain_classifier(two_class, AuxTask("classifier", epochs=1, seed=0), SMALL)
    last = len(t.model.specs) - 1
    assert np.all(t.model.params[f"{last}.bias"].data == 0)
    opt = Adam(t.model.parameters(), lr=0.1)
    for p in t.model.parameters():
        p.grad = np.ones(p.shape)
    with pytest.raises(StateError):
        opt.step()


# -- rotation prediction -----------------------------------------------------------

def test_rotnet_batch_expand():
    imgs = np.random.default_rng(0).random((3, 1, 5, 5)).astype(np.float32)
    rot, labels = make_rotnet_batch(imgs)
    assert rot.shape == (12, 1, 5, 5)
    assert np.bincount(labels).tolist() == [3, 3, 3, 3]
    assert np.array_equal(rot[labels == 0], imgs)
    for row, lab in zip(rot, labels):
        back = np.rot90(row, 4 - lab, axes=(1, 2))
        assert any(np.array_equal(back, img) for img in imgs)


def test_rotnet_batch_rows_ordered():
    imgs = np.random.default_rng(1).random((2, 1, 4, 4)).astype(np.float32)
    rot, labels = make_rotnet_batch(imgs)
    assert labels.tolist() == [0, 1, 2, 3, 0, 1, 2, 3]
    assert np.array_equal(rot[5], np.rot90(imgs[1], 1, axes=(1, 2)))


def test_rotnet_batch_sample_mode():
    imgs = np.random.default_rng(0).random((50, 1, 4, 4)).astype(np.float32)
    rot, labels = make_rotnet_batch(imgs, seed=3, mode="sample")
    assert rot.shape == imgs.shape
    for r, lab, img in zip(rot, labels, imgs):
        assert np.array_equal(np.rot90(r, 4 - lab, axes=(1, 2)), img)
    assert set(labels.tolist()) == {0, 1, 2, 3}


def test_rotnet_batch_non_square():
    with pytest.raises(ArgumentError):
        make_rotnet_batch(np.zeros((1, 1, 4, 5)))


def test_rotnet_learns_bar_orientation():
    ds, plan = normal_view(["bar_top", "disc"], n=60)
    t = pretrain_rotnet(plan.train_view(ds), AuxTask("rotnet", epochs=10, lr=3e-3, batch_size=32, seed=0))
    assert t.train_accuracy >= 0.9


def test_rotnet_on_symmetric_discs_is_chance():
    ds, plan = normal_view(["disc", "ring"], n=60)
    t = pretrain_rotnet(plan.train_view(ds), AuxTask("rotnet", epochs=5, seed=0), SMALL)
    assert abs(t.train_accuracy - 0.25) <= 0.1


def test_rotnet_zero_epochs():
    ds, plan = normal_view(["bar_top", "disc"], n=10)
    t = pretrain_rotnet(plan.train_view(ds), AuxTask("rotnet", epochs=0, seed=2), SMALL)
    for k, v in trunk_params(t).items():
        assert np.array_equal(v, t.aux_model.params[k].data)


# -- autoencoders --------------------------------------------------------------------

def test_autoencoder_loss_decreases_and_shape():
    ds, plan = normal_view(["bar_top", "disc"], n=30)
    t = pretrain_autoencoder(plan.train_view(ds), AuxTask("autoencoder", epochs=10, seed=0), SMALL)
    assert t.history[-1] < t.history[0]
    assert t.features(ds.images[:5]).shape == (5, 8)
    assert within_transient(t.history)


def test_autoencoder_constant_data_loss_vanishes():
    ds = LabeledDataset(np.full((32, 1, 16, 16), 0.5), [0] * 32, 1).as_auxiliary()
    t = pretrain_autoencoder(ds, AuxTask("autoencoder", epochs=60, lr=1e-2, batch_size=16, seed=0), SMALL)
    assert t.history[-1] < t.history[0] / 100


def test_dae_sigma_must_be_positive():
    ds, plan = normal_view(["bar_top", "disc"], n=5)
    task = AuxTask("dae")
    task.sigma = 0.0
    with pytest.raises(ArgumentError):
        pretrain_dae(plan.train_view(ds), task, SMALL)


def test_dae_tiny_sigma_matches_autoencoder():
    ds, plan = normal_view(["bar_top", "disc"], n=20)
    train = plan.train_view(ds)
    ae = pretrain_autoencoder(train, AuxTask("autoencoder", epochs=3, seed=4), SMALL)
    dae = pretrain_dae(train, AuxTask("dae", epochs=3, seed=4, sigma=1e-7), SMALL)
    np.testing.assert_allclose(dae.history, ae.history, rtol=1e-3)


def test_dae_beats_identity_noise_floor():
    ds, plan = normal_view(["bar_top", "disc"], n=60, noise=0.0)
    train = plan.train_view(ds)
    sigma = 0.3
    rng = np.random.default_rng(0)
    noisy = np.clip(train.images + rng.normal(0, sigma, train.images.shape), 0, 1)
    identity_loss = float(np.mean((noisy - train.images) ** 2))
    t = pretrain_dae(train, AuxTask("dae", epochs=15, seed=0, sigma=sigma, lr=3e-3))
    assert t.history[-1] < identity_loss


# -- contrastive ---------------------------------------------------------------------

def test_nt_xent_direct_formula():
    e = np.array([[1, 0, 0], [1, 0, 0], [0, 1, 0], [0, 1, 0]], dtype=np.float64)
    loss = nt_xent_loss(Tensor(e, dtype=np.float64), 0.5).item()
    expected = -math.log(math.exp(2) / (math.exp(2) + 2 * math.exp(0)))
    assert loss == pytest.approx(expected, rel=1e-12)


def test_nt_xent_invariances():
    rng = np.random.default_rng(0)
    e = rng.normal(size=(8, 5))
    base = nt_xent_loss(Tensor(e, dtype=np.float64), 0.3).item()
    perm = rng.permutation(4)
    swapped = e.reshape(4, 2, 5)[perm].reshape(8, 5)
    assert nt_xent_loss(Tensor(swapped, dtype=np.float64), 0.3).item() == pytest.approx(base, rel=1e-12)
    assert nt_xent_loss(Tensor(10 * e, dtype=np.float64), 0.3).item() == pytest.approx(base, rel=1e-12)


def test_nt_xent_needs_negatives():
    with pytest.raises(ArgumentError):
        nt_xent_loss(Tensor(np.eye(2)), 0.5)
    with pytest.raises(ArgumentError):
        nt_xent_loss(Tensor(np.ones((3, 2))), 0.5)


def test_simclr_views_shapes():
    imgs = np.random.default_rng(0).random((3, 1, 16, 16)).astype(np.float32)
    views = simclr_views(imgs, np.random.default_rng(0))
    assert views.shape == (6, 1, 16, 16)
    assert views.min() >= 0 and views.max() <= 1
    plain = simclr_views(imgs, np.random.default_rng(0), augmentations=())
    assert np.array_equal(plain[0], plain[1])


@pytest.fixture(scope="module")
def simclr_teacher():
    ds, plan = normal_view(["bar_top", "disc", "ring"], n=30)
    train = plan.train_view(ds)
    return train, pretrain_simclr(train, AuxTask("simclr", epochs=10, batch_size=32, seed=0))


def test_simclr_loss_decreases(simclr_teacher):
    _, t = simclr_teacher
    assert t.history[-1] < t.history[0]


def test_simclr_deterministic():
    ds, plan = normal_view(["bar_top", "disc"], n=10)
    train = plan.train_view(ds)
    a = pretrain_simclr(train, AuxTask("simclr", epochs=1, batch_size=8, seed=5), SMALL)
    b = pretrain_simclr(train, AuxTask("simclr", epochs=1, batch_size=8, seed=5), SMALL)
    assert a.model.param_hash() == b.model.param_hash()


def test_simclr_positive_pairs_more_similar(simclr_teacher):
    train, t = simclr_teacher
    views = simclr_views(train.images[:40], np.random.default_rng(7))
    z = t.trunk_features(views)
    z = z / np.linalg.norm(z, axis=1, keepdims=True)
    sim = z @ z.T
    idx = np.arange(0, len(z), 2)
    positive = sim[idx, idx + 1].mean()
    mask = np.ones_like(sim, bool)
    np.fill_diagonal(mask, False)
    mask[idx, idx + 1] = mask[idx + 1, idx] = False
    assert positive > sim[mask].mean()


def test_simclr_small_batch():
    ds, plan = normal_view(["bar_top", "disc"], n=5)
    with pytest.raises(ArgumentError):
        pretrain_simclr(plan.train_view(ds), AuxTask("simclr", batch_size=3), SMALL)


# -- supervised baseline and random -----------------------------------------------

def test_baseline_separable():
    ds, plan = normal_view(["bar_top", "disc", "bar_left"], n=40, anomaly=2)
    t = pretrain_supervised_baseline(plan.train_view(ds), plan.pool_view(ds),
                                     AuxTask("supervised_baseline", epochs=8, lr=1e-2, batch_size=16, seed=0), SMALL)
    assert t.train_accuracy >= 0.95
    assert t.task.kind == "supervised_baseline" and t.is_baseline
    opt = Adam(t.model.parameters(), lr=0.1)
    for p in t.model.parameters():
        p.grad = np.ones(p.shape)
    with pytest.raises(StateError):
        opt.step()


def test_baseline_needs_pool_view():
    ds, plan = normal_view(["bar_top", "disc", "bar_left"], n=10, anomaly=2)
    normal = plan.train_view(ds)
    with pytest.raises(ArgumentError):
        pretrain_supervised_baseline(normal, None, AuxTask("supervised_baseline", epochs=1), SMALL)
    stray = ds.subset(plan.test_anomaly, role="raw")
    with pytest.raises(HygieneError):
        pretrain_supervised_baseline(normal, stray, AuxTask("supervised_baseline", epochs=1), SMALL)


def test_random_teacher_seeds():
    a = random_teacher(SMALL, (1, 16, 16), 0)
    b = random_teacher(SMALL, (1, 16, 16), 0)
    c = random_teacher(SMALL, (1, 16, 16), 1)
    assert a.model.param_hash() == b.model.param_hash() != c.model.param_hash()
    out = a.features(np.random.default_rng(0).random((4, 1, 16, 16)))
    assert np.all(np.isfinite(out))


@pytest.mark.parametrize("kind", ["classifier", "rotnet", "autoencoder", "dae", "simclr"])
def test_pretraining_rejects_anomaly_views(kind):
    ds, plan = normal_view(["bar_top", "disc", "bar_left"], n=10, anomaly=2)
    with pytest.raises(HygieneError):
        pretrain(kind, plan.pool_view(ds), AuxTask(kind, epochs=1, batch_size=8), SMALL)
    with pytest.raises(HygieneError):
        pretrain(kind, ds, AuxTask(kind, epochs=1, batch_size=8), SMALL)


@pytest.mark.parametrize("kind", ["classifier", "rotnet", "autoencoder", "dae", "simclr"])
def test_losses_non_increasing_within_transient(kind):
    ds, plan = normal_view(["bar_top", "disc", "ring"], n=20)
    train = ds.as_auxiliary() if kind == "classifier" else plan.train_view(ds)
    t = pretrain(kind, train, AuxTask(kind, epochs=5, batch_size=16, seed=0), SMALL)
    assert within_transient(t.history), t.history


def test_teacher_save_load_round_trip(tmp_path, two_class):
    t = pretrain_classifier(two_class, AuxTask("classifier", epochs=1, seed=0), SMALL)
    t.save(tmp_path / "t.ckpt")
    back = Teacher.load(tmp_path / "t.ckpt")
    assert back.model.param_hash() == t.model.param_hash()
    assert back.task == t.task
    assert back.history == t.history
    assert back.model.frozen
