"""Teacher representations from auxiliary tasks.

Each ``pretrain_*`` function trains the shared encoder trunk on one task,
discards the task head (or decoder) and returns a frozen :class:`Teacher`.
Except for the supervised baseline, all of them refuse data that is not a
normal-only or auxiliary view.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .autodiff import (
    Tensor,
    l2_normalize,
    masked_fill,
    matmul,
    mse_loss,
    softmax_cross_entropy,
    transpose,
)
from .datasets import ANOMALY_POOL, LabeledDataset, require_normal_only
from .errors import ArgumentError, HygieneError
from .nets import (
    Dense,
    LayerSpec,
    Model,
    ReLU,
    build_model,
    default_encoder,
    load_checkpoint,
    mirrored_decoder,
    projection_of,
    save_checkpoint,
    trunk_of,
)
from .rng import derive_seed, make_rng
from .training import fit

TASK_KINDS = ("random", "classifier", "rotnet", "autoencoder", "dae", "simclr", "supervised_baseline")
SIMCLR_AUGMENTATIONS = ("crop", "flip", "noise")


@dataclass
class AuxTask:
    """Auxiliary pre-training objective and its training hyperparameters."""

    kind: str
    epochs: int = 10
    lr: float = 1e-3
    batch_size: int = 64
    seed: int = 0
    sigma: float = 0.1
    temperature: float = 0.5
    augmentations: Tuple[str, ...] = SIMCLR_AUGMENTATIONS

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ArgumentError(f"unknown auxiliary task {self.kind!r}; expected one of {TASK_KINDS}")
        if self.kind == "dae" and not self.sigma > 0:
            raise ArgumentError("denoising autoencoder needs sigma > 0")
        if self.kind == "simclr" and not self.temperature > 0:
            raise ArgumentError("SimCLR needs temperature > 0")
        if self.epochs < 0 or self.lr <= 0 or self.batch_size < 1:
            raise ArgumentError("epochs must be >= 0, lr > 0 and batch_size >= 1")
        unknown = set(self.augmentations) - set(SIMCLR_AUGMENTATIONS)
        if unknown:
            raise ArgumentError(f"unknown augmentations {sorted(unknown)}")
        self.augmentations = tuple(self.augmentations)

    def as_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["augmentations"] = list(self.augmentations)
        return d


@dataclass
class Teacher:
    """Frozen network whose outputs are the distillation targets."""

    model: Model
    task: AuxTask
    history: List[float] = field(default_factory=list)
    train_accuracy: Optional[float] = None
    aux_model: Optional[Model] = None

    def __post_init__(self):
        if not self.model.frozen:
            self.model.freeze()

    @property
    def is_baseline(self) -> bool:
        return self.task.kind == "supervised_baseline"

    @property
    def fingerprint(self) -> bytes:
        return self.model.fingerprint

    def features(self, images: np.ndarray) -> np.ndarray:
        """Projection-head outputs, float64 ``[N, D]``."""
        return self.model.predict(images)

    def trunk_features(self, images: np.ndarray) -> np.ndarray:
        """Pooled trunk outputs, i.e. everything before the projection head."""
        return self.model.predict(images, upto=len(self.model.specs) - 1)

    def save(self, path) -> None:
        save_checkpoint(self.model, path, {"task": self.task.as_dict(), "history": self.history,
                                           "train_accuracy": self.train_accuracy})

    @classmethod
    def load(cls, path, expect=None) -> "Teacher":
        model, prov = load_checkpoint(path, expect)
        task = dict(prov.get("task", {"kind": "random"}))
        task["augmentations"] = tuple(task.get("augmentations", SIMCLR_AUGMENTATIONS))
        return cls(model.freeze(), AuxTask(**task), list(prov.get("history", [])), prov.get("train_accuracy"))


# -- helpers --------------------------------------------------------------------------

def _encoder(encoder: Optional[Sequence[LayerSpec]]) -> List[LayerSpec]:
    specs = list(encoder) if encoder is not None else default_encoder()
    projection_of(specs)
    return specs


def _finish(trained: Model, encoder: Sequence[LayerSpec], task: AuxTask, history, accuracy=None,
            keep_projection: bool = False) -> Teacher:
    """Keep the trained trunk, append a fresh projection head and freeze."""
    if keep_projection:
        model = trained.truncated(len(encoder))
    else:
        trunk = trained.truncated(len(trunk_of(encoder)))
        model = trunk.extended([projection_of(encoder)], derive_seed(task.seed, "projection"))
    return Teacher(model.freeze(), task, history, accuracy, aux_model=trained)


def _train_classifier(images: np.ndarray, labels: np.ndarray, num_classes: int, encoder, task: AuxTask,
                      sample_weights_by_class: bool = False) -> Tuple[Model, List[float], float]:
    net = build_model(trunk_of(encoder) + [Dense(num_classes)], images.shape[1:], derive_seed(task.seed, "init"))
    order = np.arange(len(images))
    if sample_weights_by_class:
        # oversample minority classes so every class contributes equally per epoch
        counts = np.bincount(labels, minlength=num_classes)
        target = counts.max()
        order = np.concatenate([np.resize(np.flatnonzero(labels == c), target) for c in range(num_classes)
                                if counts[c] > 0])

    def batch_loss(idx):
        sel = order[idx]
        return softmax_cross_entropy(net(Tensor(images[sel])), labels[sel])

    def evaluate():
        return softmax_cross_entropy(Tensor(net.predict(images)), labels).item()

    history = fit(net.parameters(), batch_loss, len(order), task.epochs, task.batch_size, task.lr,
                  make_rng(task.seed, "shuffle"), evaluate)
    accuracy = float(np.mean(net.predict(images).argmax(axis=1) == labels))
    return net, history, accuracy


def _dense_labels(labels: np.ndarray) -> Tuple[np.ndarray, int]:
    classes, dense = np.unique(labels, return_inverse=True)
    return dense.astype(np.int64), len(classes)


# -- tasks --------------------------------------------------------------------------------

def pretrain_classifier(ds: LabeledDataset, task: Optional[AuxTask] = None,
                        encoder: Optional[Sequence[LayerSpec]] = None) -> Teacher:
    """Cross-entropy classification over every label present in ``ds``."""
    task = task or AuxTask("classifier")
    require_normal_only(ds, "classifier pre-training")
    encoder = _encoder(encoder)
    labels, k = _dense_labels(ds.labels)
    if k < 2:
        raise ArgumentError("classification pre-training needs at least two classes")
    net, history, acc = _train_classifier(ds.images, labels, k, encoder, task)
    return _finish(net, encoder, task, history, acc)


def make_rotnet_batch(images: np.ndarray, seed=None, mode: str = "expand") -> Tuple[np.ndarray, np.ndarray]:
    """Rotated copies of ``images`` and their quarter-turn labels.

    ``expand`` emits all four rotations of every image (row ``4*i + r`` is
    image ``i`` turned ``r`` times counter-clockwise); ``sample`` draws one
    random rotation per image.
    """
    images = np.asarray(images, dtype=np.float32)
    if images.ndim != 4 or images.shape[2] != images.shape[3]:
        raise ArgumentError(f"RotNet needs square [N,C,H,W] images, got {images.shape}")
    if mode == "expand":
        rotated = np.stack([np.rot90(images, r, axes=(2, 3)) for r in range(4)], axis=1)
        return rotated.reshape((-1,) + images.shape[1:]).copy(), np.tile(np.arange(4), len(images))
    if mode == "sample":
        rng = make_rng(0 if seed is None else seed)
        labels = rng.integers(0, 4, size=len(images))
        rotated = np.stack([np.rot90(img, r, axes=(1, 2)) for img, r in zip(images, labels)])
        return rotated, labels.astype(np.int64)
    raise ArgumentError(f"unknown RotNet batch mode {mode!r}")


def pretrain_rotnet(ds: LabeledDataset, task: Optional[AuxTask] = None,
                    encoder: Optional[Sequence[LayerSpec]] = None) -> Teacher:
    """Four-way rotation prediction on normal data."""
    task = task or AuxTask("rotnet")
    require_normal_only(ds, "RotNet pre-training")
    encoder = _encoder(encoder)
    images, labels = make_rotnet_batch(ds.images, mode="expand")
    net, history, acc = _train_classifier(images, labels, 4, encoder, task)
    return _finish(net, encoder, task, history, acc)


def _train_autoencoder(ds: LabeledDataset, task: AuxTask, encoder, sigma: float) -> Teacher:
    images = ds.images
    decoder = mirrored_decoder(encoder, ds.image_shape)
    net = build_model(encoder + decoder, ds.image_shape, derive_seed(task.seed, "init"))
    if net.output_shape != ds.image_shape:
        raise ArgumentError(f"decoder output {net.output_shape} does not match images {ds.image_shape}")
    noise_rng = make_rng(task.seed, "noise")

    def corrupt(x):
        if sigma == 0:
            return x
        return np.clip(x + noise_rng.normal(0, sigma, size=x.shape), 0, 1).astype(np.float32)

    def batch_loss(idx):
        x = images[idx]
        return mse_loss(net(Tensor(corrupt(x))), x)

    eval_rng_seed = derive_seed(task.seed, "eval-noise")

    def evaluate():
        x = images
        if sigma > 0:
            rng = make_rng(eval_rng_seed)
            x = np.clip(images + rng.normal(0, sigma, size=images.shape), 0, 1).astype(np.float32)
        return float(np.mean((net.predict(x) - images) ** 2))

    history = fit(net.parameters(), batch_loss, len(images), task.epochs, task.batch_size, task.lr,
                  make_rng(task.seed, "shuffle"), evaluate)
    return _finish(net, encoder, task, history, keep_projection=True)


def pretrain_autoencoder(ds: LabeledDataset, task: Optional[AuxTask] = None,
                         encoder: Optional[Sequence[LayerSpec]] = None) -> Teacher:
    """Reconstruction with a mirrored decoder; the projection is the bottleneck."""
    task = task or AuxTask("autoencoder")
    require_normal_only(ds, "autoencoder pre-training")
    return _train_autoencoder(ds, task, _encoder(encoder), 0.0)


def pretrain_dae(ds: LabeledDataset, task: Optional[AuxTask] = None,
                 encoder: Optional[Sequence[LayerSpec]] = None) -> Teacher:
    """Reconstruct clean images from ``clip(x + N(0, sigma^2), 0, 1)``."""
    task = task or AuxTask("dae")
    if not task.sigma > 0:
        raise ArgumentError("denoising autoencoder needs sigma > 0")
    require_normal_only(ds, "denoising autoencoder pre-training")
    return _train_autoencoder(ds, task, _encoder(encoder), task.sigma)


def nt_xent_loss(embeddings: Tensor, temperature: float) -> Tensor:
    """Normalised-temperature cross entropy over ``2N`` embeddings.

    Rows ``2i`` and ``2i+1`` are the two views of sample ``i``.  Each row is
    classified against all other rows by cosine similarity / temperature.
    """
    if embeddings.ndim != 2 or embeddings.shape[0] % 2:
        raise ArgumentError(f"embeddings must be [2N, D], got {embeddings.shape}")
    rows, dim = embeddings.shape
    if rows // 2 < 2:
        raise ArgumentError("NT-Xent needs at least two samples to provide negatives")
    if dim < 2:
        raise ArgumentError("NT-Xent needs embedding dimension >= 2")
    if not temperature > 0:
        raise ArgumentError("temperature must be positive")
    z = l2_normalize(embeddings)
    logits = matmul(z, transpose(z)) * (1.0 / temperature)
    logits = masked_fill(logits, np.eye(rows, dtype=bool), -1e9)
    partners = np.arange(rows) ^ 1
    return softmax_cross_entropy(logits, partners)


def simclr_views(images: np.ndarray, rng: np.random.Generator,
                 augmentations: Sequence[str] = SIMCLR_AUGMENTATIONS) -> np.ndarray:
    """Two augmented views per image, interleaved as rows ``2i`` / ``2i+1``."""
    n, c, h, w = images.shape
    views = np.repeat(images, 2, axis=0)
    if "crop" in augmentations:
        padded = np.pad(views, ((0, 0), (0, 0), (2, 2), (2, 2)))
        offsets = rng.integers(0, 5, size=(2 * n, 2))
        views = np.stack([padded[i, :, r:r + h, q:q + w] for i, (r, q) in enumerate(offsets)])
    if "flip" in augmentations:
        flip = rng.random(2 * n) < 0.5
        views[flip] = views[flip][..., ::-1]
    if "noise" in augmentations:
        views = np.clip(views + rng.normal(0, 0.05, size=views.shape), 0, 1)
    return views.astype(np.float32)


def pretrain_simclr(ds: LabeledDataset, task: Optional[AuxTask] = None,
                    encoder: Optional[Sequence[LayerSpec]] = None) -> Teacher:
    """Contrastive pre-training with a reduced augmentation set."""
    task = task or AuxTask("simclr")
    require_normal_only(ds, "SimCLR pre-training")
    if task.batch_size < 4:
        raise ArgumentError("SimCLR needs batch_size >= 4")
    encoder = _encoder(encoder)
    dim = projection_of(encoder).out_dim
    net = build_model(trunk_of(encoder) + [Dense(2 * dim), ReLU(), Dense(dim)], ds.image_shape,
                      derive_seed(task.seed, "init"))
    aug_rng = make_rng(task.seed, "augment")
    images = ds.images

    def batch_loss(idx):
        return nt_xent_loss(net(Tensor(simclr_views(images[idx], aug_rng, task.augmentations))), task.temperature)

    eval_seed = derive_seed(task.seed, "eval-views")

    def evaluate():
        rng = make_rng(eval_seed)
        losses, weights = [], []
        for start in range(0, len(images), task.batch_size):
            chunk = images[start:start + task.batch_size]
            if len(chunk) < 2:
                continue
            emb = Tensor(net.predict(simclr_views(chunk, rng, task.augmentations)))
            losses.append(nt_xent_loss(emb, task.temperature).item())
            weights.append(len(chunk))
        return float(np.average(losses, weights=weights))

    history = fit(net.parameters(), batch_loss, len(images), task.epochs, task.batch_size, task.lr,
                  make_rng(task.seed, "shuffle"), evaluate, min_batch=2)
    return _finish(net, encoder, task, history)


def pretrain_supervised_baseline(normal: LabeledDataset, anomalies: LabeledDataset, task: Optional[AuxTask] = None,
                                 encoder: Optional[Sequence[LayerSpec]] = None) -> Teacher:
    """Normal-versus-anomaly classifier trained on a held-out anomaly pool.

    This is the only teacher allowed to see anomaly labels; it marks the
    performance ceiling.
    """
    task = task or AuxTask("supervised_baseline")
    if task.kind != "supervised_baseline":
        task = dataclasses.replace(task, kind="supervised_baseline")
    require_normal_only(normal, "supervised baseline (normal side)")
    if anomalies is None or len(anomalies) == 0:
        raise ArgumentError("supervised baseline needs a non-empty anomaly pool")
    if anomalies.role != ANOMALY_POOL:
        raise HygieneError(f"baseline anomalies must come from a training-only pool, got '{anomalies.role}'")
    encoder = _encoder(encoder)
    images = np.concatenate([normal.images, anomalies.images])
    labels = np.r_[np.zeros(len(normal), np.int64), np.ones(len(anomalies), np.int64)]
    net, history, acc = _train_classifier(images, labels, 2, encoder, task, sample_weights_by_class=True)
    return _finish(net, encoder, task, history, acc)


def random_teacher(encoder: Optional[Sequence[LayerSpec]], input_shape, seed: int = 0) -> Teacher:
    """Untrained teacher with freshly initialised weights."""
    encoder = _encoder(encoder)
    model = build_model(encoder, input_shape, seed)
    return Teacher(model.freeze(), AuxTask("random", epochs=0, seed=int(seed)))


def pretrain(kind: str, ds: LabeledDataset, task: AuxTask, encoder=None, anomalies: Optional[LabeledDataset] = None):
    """Dispatch on ``kind``; ``anomalies`` is only consulted for the baseline."""
    if kind == "random":
        return random_teacher(encoder, ds.image_shape, task.seed)
    if kind == "supervised_baseline":
        return pretrain_supervised_baseline(ds, anomalies, task, encoder)
    fn = {"classifier": pretrain_classifier, "rotnet": pretrain_rotnet, "autoencoder": pretrain_autoencoder,
          "dae": pretrain_dae, "simclr": pretrain_simclr}[kind]
    return fn(ds, task, encoder)


__all__ = [
    "AuxTask",
    "Teacher",
    "TASK_KINDS",
    "make_rotnet_batch",
    "nt_xent_loss",
    "pretrain",
    "pretrain_autoencoder",
    "pretrain_classifier",
    "pretrain_dae",
    "pretrain_rotnet",
    "pretrain_simclr",
    "pretrain_supervised_baseline",
    "random_teacher",
    "simclr_views",
]
