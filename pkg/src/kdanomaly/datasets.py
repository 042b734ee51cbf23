"""Desk-scale image data: synthetic shapes, IDX files, splits and patches.

Every :class:`LabeledDataset` carries a ``role`` tag.  Training views produced
by a :class:`SplitPlan` are tagged ``"normal"`` or ``"anomaly_pool"``; test data
is only handed out as plain arrays.  Freshly generated or loaded corpora are
``"raw"`` until declared ``"auxiliary"``.  Stages that must never see anomalies call
:func:`require_normal_only`, which accepts only ``normal`` and ``auxiliary``
data.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from .errors import ArgumentError, ConsistencyError, FormatError, HygieneError, NotFoundError
from .rng import SeedLike, make_rng

RAW = "raw"
NORMAL = "normal"
AUXILIARY = "auxiliary"
ANOMALY_POOL = "anomaly_pool"

SPLIT_MODES = ("unimodal", "multimodal", "one_vs_one")


@dataclass
class LabeledDataset:
    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    name: str = "dataset"
    role: str = RAW
    source_indices: Optional[np.ndarray] = None
    class_names: Tuple[str, ...] = ()

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ArgumentError(f"images must be [N,C,H,W], got shape {self.images.shape}")
        if len(self.images) < 1:
            raise ArgumentError("a dataset needs at least one image")
        if self.labels.shape != (len(self.images),):
            raise ConsistencyError(f"{len(self.labels)} labels for {len(self.images)} images")
        if self.images.min() < 0 or self.images.max() > 1:
            raise ArgumentError("pixel values must lie in [0, 1]")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise ArgumentError(f"labels must lie in 0..{self.num_classes - 1}")
        if self.source_indices is None:
            self.source_indices = np.arange(len(self.images))

    def __len__(self) -> int:
        return len(self.images)

    @property
    def image_shape(self) -> Tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, indices, role: Optional[str] = None, name: Optional[str] = None) -> "LabeledDataset":
        indices = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(self.images[indices], self.labels[indices], self.num_classes,
                              name=name or self.name, role=role or self.role,
                              source_indices=self.source_indices[indices], class_names=self.class_names)

    def as_auxiliary(self) -> "LabeledDataset":
        """Declare this corpus independent of any evaluation data."""
        if self.role not in (RAW, AUXILIARY):
            raise HygieneError(f"a '{self.role}' view cannot be relabelled as auxiliary data")
        return LabeledDataset(self.images, self.labels, self.num_classes, self.name, AUXILIARY,
                              self.source_indices, self.class_names)


def require_normal_only(ds: LabeledDataset, stage: str) -> None:
    if not isinstance(ds, LabeledDataset):
        raise HygieneError(f"{stage} needs a LabeledDataset view produced by a split")
    if ds.role not in (NORMAL, AUXILIARY):
        raise HygieneError(f"{stage} only accepts normal training data, got a '{ds.role}' dataset")


# -- synthetic shapes --------------------------------------------------------------------

def _bar_top(s: int, rng: np.random.Generator) -> np.ndarray:
    img = np.zeros((s, s))
    thick = int(rng.integers(2, 4))
    r0 = int(rng.integers(1, max(2, s // 4)))
    c0 = int(rng.integers(1, max(2, s // 5 + 1)))
    c1 = s - int(rng.integers(1, max(2, s // 5 + 1)))
    img[r0:r0 + thick, c0:c1] = rng.uniform(0.7, 1.0)
    return img


def _rotated(base: Callable, k: int) -> Callable:
    def render(s, rng):
        return np.rot90(base(s, rng), k)
    return render


def _radial(s: int, rng: np.random.Generator):
    c = (s - 1) / 2
    cy, cx = c + rng.uniform(-1, 1), c + rng.uniform(-1, 1)
    yy, xx = np.mgrid[0:s, 0:s]
    return np.hypot(yy - cy, xx - cx)


def _disc(s, rng):
    r = rng.uniform(0.2 * s, 0.3 * s)
    return (_radial(s, rng) <= r) * rng.uniform(0.7, 1.0)


def _ring(s, rng):
    outer = rng.uniform(0.3 * s, 0.4 * s)
    width = rng.uniform(1.5, 2.5)
    d = _radial(s, rng)
    return ((d <= outer) & (d >= outer - width)) * rng.uniform(0.7, 1.0)


def _corner(s, rng):
    img = np.zeros((s, s))
    thick = int(rng.integers(2, 4))
    off = int(rng.integers(1, 3))
    length = int(rng.integers(s // 2, 3 * s // 4))
    v = rng.uniform(0.7, 1.0)
    img[off:off + thick, off:off + length] = v
    img[off:off + length, off:off + thick] = v
    return img


def _grating(s, rng):
    freq = rng.uniform(3, 5)
    phase = rng.uniform(0, 2 * np.pi)
    rows = 0.5 + 0.5 * np.sin(2 * np.pi * freq * np.arange(s) / s + phase)
    return np.repeat(rows[:, None], s, axis=1) * rng.uniform(0.7, 1.0)


def _cross(s, rng):
    img = np.zeros((s, s))
    c = s // 2 + int(rng.integers(-1, 2))
    half = int(rng.integers(s // 4, s // 3 + 1))
    v = rng.uniform(0.7, 1.0)
    img[c - 1:c + 1, c - half:c + half] = v
    img[c - half:c + half, c - 1:c + 1] = v
    return img


def _diag(s, rng):
    yy, xx = np.mgrid[0:s, 0:s]
    offset = rng.uniform(-2, 2)
    return (np.abs(yy - xx - offset) <= 1.0) * rng.uniform(0.7, 1.0)


SHAPE_FAMILIES: Dict[str, Callable[[int, np.random.Generator], np.ndarray]] = {
    "bar_top": _bar_top,
    "bar_left": _rotated(_bar_top, 1),
    "bar_bottom": _rotated(_bar_top, 2),
    "bar_right": _rotated(_bar_top, 3),
    "disc": _disc,
    "ring": _ring,
    "corner": _corner,
    "grating": _grating,
    "cross": _cross,
    "diag": _diag,
}

DEFAULT_FAMILY_ORDER = ("bar_top", "disc", "ring", "corner", "grating", "cross", "bar_left",
                        "bar_bottom", "bar_right", "diag")


@dataclass
class SyntheticConfig:
    classes: object = 3
    samples_per_class: int = 100
    image_size: int = 16
    seed: int = 0
    noise: float = 0.05
    name: str = "synthetic"

    def families(self) -> List[str]:
        if isinstance(self.classes, int):
            if not 2 <= self.classes <= len(DEFAULT_FAMILY_ORDER):
                raise ArgumentError(f"classes must be between 2 and {len(DEFAULT_FAMILY_ORDER)}")
            return list(DEFAULT_FAMILY_ORDER[:self.classes])
        families = list(self.classes)
        unknown = [f for f in families if f not in SHAPE_FAMILIES]
        if unknown:
            raise ArgumentError(f"unknown shape families {unknown}; known: {sorted(SHAPE_FAMILIES)}")
        if len(families) < 2:
            raise ArgumentError("a synthetic dataset needs at least two classes")
        return families


def generate_synthetic(config: SyntheticConfig) -> LabeledDataset:
    """Render ``samples_per_class`` images for each shape family.

    Images are single channel; samples are interleaved by class so any prefix
    is roughly balanced.
    """
    families = config.families()
    if config.samples_per_class < 1:
        raise ArgumentError("samples_per_class must be at least 1")
    if config.image_size < 8:
        raise ArgumentError("image_size must be at least 8")
    rng = make_rng(config.seed)
    s = config.image_size
    n = config.samples_per_class * len(families)
    images = np.zeros((n, 1, s, s), dtype=np.float32)
    labels = np.zeros(n, dtype=np.int64)
    i = 0
    for _ in range(config.samples_per_class):
        for label, family in enumerate(families):
            img = SHAPE_FAMILIES[family](s, rng)
            if config.noise > 0:
                img = img + rng.normal(0, config.noise, size=img.shape)
            images[i, 0] = np.clip(img, 0, 1)
            labels[i] = label
            i += 1
    return LabeledDataset(images, labels, len(families), name=config.name, class_names=tuple(families))


# -- IDX format ----------------------------------------------------------------------------

_IDX_UBYTE = 0x08


def _read_idx(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise NotFoundError(f"no such file: {path}")
    buf = path.read_bytes()
    if len(buf) < 4 or buf[0] != 0 or buf[1] != 0:
        raise FormatError(f"{path}: bad IDX magic")
    dtype, ndims = buf[2], buf[3]
    if dtype != _IDX_UBYTE:
        raise FormatError(f"{path}: unsupported IDX dtype 0x{dtype:02x} (only unsigned bytes)")
    header = 4 + 4 * ndims
    if len(buf) < header:
        raise FormatError(f"{path}: truncated IDX header")
    dims = struct.unpack(f">{ndims}I", buf[4:header])
    count = int(np.prod(dims)) if dims else 0
    if len(buf) != header + count:
        raise FormatError(f"{path}: payload has {len(buf) - header} bytes, header implies {count}")
    return np.frombuffer(buf, dtype=np.uint8, offset=header).reshape(dims)


def load_idx(images_path, labels_path, name: str = "idx") -> LabeledDataset:
    """Load an IDX image/label pair, scaling bytes into [0, 1].

    Three-dimensional image files are read as single-channel ``[N,H,W]``;
    four-dimensional files as ``[N,C,H,W]``.
    """
    raw = _read_idx(images_path)
    if raw.ndim == 3:
        raw = raw[:, None]
    elif raw.ndim != 4:
        raise FormatError(f"{images_path}: expected 3 or 4 image dimensions, got {raw.ndim}")
    labels = _read_idx(labels_path)
    if labels.ndim != 1:
        raise FormatError(f"{labels_path}: label file must be one-dimensional")
    if len(labels) != len(raw):
        raise ConsistencyError(f"{len(labels)} labels for {len(raw)} images")
    images = raw.astype(np.float32) / np.float32(255.0)
    return LabeledDataset(images, labels.astype(np.int64), int(labels.max()) + 1 if len(labels) else 1, name=name)


def write_idx(ds: LabeledDataset, images_path, labels_path) -> None:
    pixels = np.rint(ds.images * 255).astype(np.uint8)
    if pixels.shape[1] == 1:
        pixels = pixels[:, 0]
    header = bytes([0, 0, _IDX_UBYTE, pixels.ndim]) + struct.pack(f">{pixels.ndim}I", *pixels.shape)
    Path(images_path).write_bytes(header + pixels.tobytes())
    if ds.labels.max() > 255:
        raise FormatError("labels above 255 cannot be stored as unsigned bytes")
    labels = ds.labels.astype(np.uint8)
    Path(labels_path).write_bytes(bytes([0, 0, _IDX_UBYTE, 1]) + struct.pack(">I", len(labels)) + labels.tobytes())


# -- splits --------------------------------------------------------------------------------

@dataclass
class SplitPlan:
    mode: str
    class_id: int
    train_normal: np.ndarray
    test_normal: np.ndarray
    test_anomaly: np.ndarray
    anomaly_pool: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    anomaly_classes: Tuple[int, ...] = ()

    def is_anomaly_label(self, labels) -> np.ndarray:
        return np.isin(np.asarray(labels), self.anomaly_classes)

    def train_view(self, ds: LabeledDataset) -> LabeledDataset:
        return ds.subset(self.train_normal, role=NORMAL, name=f"{ds.name}:train_normal")

    def pool_view(self, ds: LabeledDataset) -> LabeledDataset:
        if len(self.anomaly_pool) == 0:
            raise ArgumentError("split has an empty anomaly pool")
        return ds.subset(self.anomaly_pool, role=ANOMALY_POOL, name=f"{ds.name}:anomaly_pool")

    def test_view(self, ds: LabeledDataset) -> Tuple[np.ndarray, np.ndarray]:
        """Test images and binary targets (1 = anomaly)."""
        idx = np.concatenate([self.test_normal, self.test_anomaly])
        targets = np.r_[np.zeros(len(self.test_normal), int), np.ones(len(self.test_anomaly), int)]
        return ds.images[idx], targets

    def validate(self, ds: LabeledDataset) -> None:
        sets = [set(self.train_normal.tolist()), set(self.test_normal.tolist()),
                set(self.test_anomaly.tolist()), set(self.anomaly_pool.tolist())]
        for i in range(len(sets)):
            for j in range(i + 1, len(sets)):
                if sets[i] & sets[j]:
                    raise HygieneError("split index sets overlap")
        normal_idx = np.concatenate([self.train_normal, self.test_normal])
        anomalous_idx = np.concatenate([self.test_anomaly, self.anomaly_pool])
        if self.is_anomaly_label(ds.labels[normal_idx]).any():
            raise HygieneError("an anomaly-labelled sample landed in the normal sets")
        if not self.is_anomaly_label(ds.labels[anomalous_idx]).all():
            raise HygieneError("a normal-labelled sample landed in the anomaly sets")


def build_split(ds: LabeledDataset, mode: str, class_id: int, test_fraction: float = 0.3, seed: SeedLike = 0,
                balance: bool = False, anomaly_pool_fraction: float = 0.0,
                anomaly_class: Optional[int] = None) -> SplitPlan:
    """Partition ``ds`` into train-normal, test-normal and test-anomaly indices.

    ``unimodal``: ``class_id`` is normal, every other class anomalous.
    ``multimodal``: ``class_id`` is anomalous, every other class normal.
    ``one_vs_one``: ``class_id`` is normal, ``anomaly_class`` (default the next
    class) anomalous.  A fraction ``anomaly_pool_fraction`` of the anomalous
    samples is set aside for supervised baselines and never evaluated on.
    """
    if mode not in SPLIT_MODES:
        raise ArgumentError(f"unknown split mode {mode!r}; expected one of {SPLIT_MODES}")
    k = ds.num_classes
    if not 0 <= class_id < k:
        raise ArgumentError(f"class_id {class_id} outside 0..{k - 1}")
    if not 0 < test_fraction < 1:
        raise ArgumentError("test_fraction must lie in (0, 1)")
    if not 0 <= anomaly_pool_fraction < 1:
        raise ArgumentError("anomaly_pool_fraction must lie in [0, 1)")

    if mode == "unimodal":
        normal_classes, anomaly_classes = [class_id], [c for c in range(k) if c != class_id]
    elif mode == "multimodal":
        normal_classes, anomaly_classes = [c for c in range(k) if c != class_id], [class_id]
    else:
        other = (class_id + 1) % k if anomaly_class is None else anomaly_class
        if other == class_id or not 0 <= other < k:
            raise ArgumentError(f"invalid anomaly class {other} for one_vs_one split")
        normal_classes, anomaly_classes = [class_id], [other]

    rng = make_rng(seed)
    normal = np.flatnonzero(np.isin(ds.labels, normal_classes))
    anomalous = np.flatnonzero(np.isin(ds.labels, anomaly_classes))
    required = [class_id] + (anomaly_classes if mode == "one_vs_one" else [])
    for c in required:
        if not np.any(ds.labels == c):
            raise ArgumentError(f"class {c} has no samples")
    if len(normal) < 2:
        raise ArgumentError("need at least two normal samples to split")
    if len(anomalous) < 1:
        raise ArgumentError("no anomalous samples for the requested split")

    normal = rng.permutation(normal)
    n_test = min(max(1, int(round(test_fraction * len(normal)))), len(normal) - 1)
    test_normal, train_normal = normal[:n_test], normal[n_test:]

    anomalous = rng.permutation(anomalous)
    n_pool = int(round(anomaly_pool_fraction * len(anomalous)))
    if anomaly_pool_fraction > 0:
        n_pool = min(max(1, n_pool), len(anomalous) - 1)
    pool, test_anomaly = anomalous[:n_pool], anomalous[n_pool:]
    if balance and len(test_anomaly) > len(test_normal):
        test_anomaly = test_anomaly[:len(test_normal)]

    plan = SplitPlan(mode, class_id, np.sort(train_normal), np.sort(test_normal), np.sort(test_anomaly),
                     np.sort(pool), tuple(anomaly_classes))
    plan.validate(ds)
    return plan


# -- patches -------------------------------------------------------------------------------

@dataclass
class PatchSet:
    source_id: int
    patches: np.ndarray
    anchors: List[Tuple[int, int]]


def _anchors(length: int, patch: int, stride: int) -> List[int]:
    if length <= patch:
        return [0]
    starts = list(range(0, length - patch + 1, stride))
    if starts[-1] != length - patch:
        starts.append(length - patch)
    return starts


def extract_patches(image: np.ndarray, patch: int, stride: int, source_id: int = 0) -> PatchSet:
    """Cut ``patch`` x ``patch`` windows every ``stride`` pixels.

    The last window along each axis is clamped flush with the border so every
    pixel is covered; images smaller than the patch are zero-padded first.
    """
    if patch <= 0 or stride <= 0:
        raise ArgumentError("patch size and stride must be positive")
    if stride > patch:
        raise ArgumentError(f"stride {stride} larger than patch {patch} would leave gaps")
    image = np.asarray(image, dtype=np.float32)
    if image.ndim != 3:
        raise ArgumentError(f"image must be [C,H,W], got {image.shape}")
    c, h, w = image.shape
    if h < patch or w < patch:
        padded = np.zeros((c, max(h, patch), max(w, patch)), dtype=np.float32)
        padded[:, :h, :w] = image
        image, h, w = padded, padded.shape[1], padded.shape[2]
    anchors = [(r, q) for r in _anchors(h, patch, stride) for q in _anchors(w, patch, stride)]
    patches = np.stack([image[:, r:r + patch, q:q + patch] for r, q in anchors])
    return PatchSet(source_id, patches, anchors)


def patchify(images: np.ndarray, patch: int, stride: int) -> Tuple[np.ndarray, np.ndarray]:
    """Patches of every image and the index of the image each came from."""
    sets = [extract_patches(img, patch, stride, i) for i, img in enumerate(images)]
    patches = np.concatenate([s.patches for s in sets])
    owners = np.concatenate([np.full(len(s.patches), s.source_id) for s in sets])
    return patches, owners


def patchify_dataset(ds: LabeledDataset, patch: int, stride: int) -> Tuple[LabeledDataset, np.ndarray]:
    patches, owners = patchify(ds.images, patch, stride)
    out = LabeledDataset(patches, ds.labels[owners], ds.num_classes, name=f"{ds.name}:patches",
                         role=ds.role, source_indices=ds.source_indices[owners], class_names=ds.class_names)
    return out, owners
