"""Config-driven experiment grid: representations x detectors.

A run pre-trains (or loads) one teacher per representation, distils a
student on normal training data, scores the test split with every requested
detector and writes result rows plus scatter/correlation reports.
"""

from __future__ import annotations

import csv
import hashlib
import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import yaml

from .brittleness import brittleness_score
from .datasets import (
    SPLIT_MODES,
    LabeledDataset,
    SplitPlan,
    SyntheticConfig,
    build_split,
    generate_synthetic,
    load_idx,
    patchify,
    patchify_dataset,
)
from .detectors import DETECTORS, fit_gaussian_stats, mahalanobis_score, mse_center_score
from .distill import DistillConfig, StudentTeacherPair, kd_scores, make_pair, train_student
from .errors import CompatibilityError, DegenerateVarianceError, NotFoundError, ValidationError
from .metrics import ProbeConfig, ScoreSet, auroc, linear_probe, pearson_corr
from .nets import default_encoder, load_checkpoint, save_checkpoint
from .pretrain import TASK_KINDS, AuxTask, Teacher, pretrain
from .rng import derive_seed, make_rng

RESULT_COLUMNS = ("dataset", "representation", "detector", "auroc", "avg_l2_norm", "probe_accuracy", "seed",
                  "wall_time_seconds")
SCATTER_COLUMNS = ("representation", "mahalanobis_full_auroc", "kd_auroc", "avg_l2_norm", "probe_accuracy")


# -- configuration ------------------------------------------------------------------------

def _take(section: dict, where: str, allowed: Dict[str, object]) -> dict:
    """Fill defaults and reject unknown keys."""
    if section is None:
        section = {}
    if not isinstance(section, dict):
        raise ValidationError(f"'{where}' must be a mapping")
    unknown = sorted(set(section) - set(allowed))
    if unknown:
        raise ValidationError(f"unknown keys in '{where}': {unknown}; allowed: {sorted(allowed)}")
    out = dict(allowed)
    out.update(section)
    return out


def _positive(value, where: str, kind=float):
    try:
        value = kind(value)
    except (TypeError, ValueError):
        raise ValidationError(f"'{where}' must be a {kind.__name__}") from None
    if value <= 0:
        raise ValidationError(f"'{where}' must be positive")
    return value


DATASET_KEYS = {"kind": "synthetic", "name": None, "classes": 3, "samples_per_class": 100, "image_size": 16,
                "noise": 0.05, "seed": None, "images": None, "labels": None}
SPLIT_KEYS = {"mode": "unimodal", "class_id": 0, "test_fraction": 0.3, "balance": False,
              "anomaly_pool_fraction": 0.0, "anomaly_class": None}
REPRESENTATION_KEYS = {"name": None, "task": None, "epochs": 10, "lr": 1e-3, "batch_size": 64, "sigma": 0.1,
                       "temperature": 0.5, "load": None, "auxiliary": None}
DISTILL_KEYS = {"lr": 1e-5, "epochs": 20, "batch_size": 64, "augmentation": "none"}
PROBE_KEYS = {"enabled": False, "lr": 1e-2, "epochs": 50, "batch_size": 64, "test_fraction": 0.3}
BRITTLENESS_KEYS = {"enabled": False, "stop_teacher": True, "max_samples": None}
ENCODER_KEYS = {"proj_dim": 32, "widths": [8, 16, 32]}
PATCH_KEYS = {"size": None, "stride": None}
TOP_KEYS = {"seed": None, "output_dir": "runs/experiment", "dataset": None, "split": None, "encoder": None,
            "representations": None, "detectors": None, "distill": None, "probe": None, "brittleness": None,
            "patches": None, "resume": True}


@dataclass
class RepresentationConfig:
    name: str
    task: str
    epochs: int = 10
    lr: float = 1e-3
    batch_size: int = 64
    sigma: float = 0.1
    temperature: float = 0.5
    load: Optional[str] = None
    auxiliary: Optional[dict] = None

    def aux_task(self, seed: int) -> AuxTask:
        return AuxTask(self.task, epochs=self.epochs, lr=self.lr, batch_size=self.batch_size, seed=seed,
                       sigma=self.sigma, temperature=self.temperature)


@dataclass
class ExperimentConfig:
    seed: int
    dataset: dict
    split: dict
    representations: List[RepresentationConfig]
    detectors: List[str]
    distill: dict = field(default_factory=lambda: dict(DISTILL_KEYS))
    probe: dict = field(default_factory=lambda: dict(PROBE_KEYS))
    brittleness: dict = field(default_factory=lambda: dict(BRITTLENESS_KEYS))
    encoder: dict = field(default_factory=lambda: dict(ENCODER_KEYS))
    patches: dict = field(default_factory=lambda: dict(PATCH_KEYS))
    output_dir: str = "runs/experiment"
    resume: bool = True

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        top = _take(raw, "<top level>", TOP_KEYS)
        if top["seed"] is None:
            raise ValidationError("a master 'seed' is required")
        if isinstance(top["seed"], bool) or not isinstance(top["seed"], int) or top["seed"] < 0:
            raise ValidationError("'seed' must be a non-negative integer")
        detectors = top["detectors"]
        if not detectors:
            raise ValidationError("'detectors' must list at least one of " + ", ".join(DETECTORS))
        if isinstance(detectors, str):
            detectors = [detectors]
        bad = [d for d in detectors if d not in DETECTORS]
        if bad:
            raise ValidationError(f"unknown detectors {bad}; allowed: {list(DETECTORS)}")
        if len(set(detectors)) != len(detectors):
            raise ValidationError("detectors must not repeat")

        dataset = _take(top["dataset"], "dataset", DATASET_KEYS)
        if dataset["kind"] == "synthetic":
            _positive(dataset["samples_per_class"], "dataset.samples_per_class", int)
        elif dataset["kind"] == "idx":
            if not dataset["images"] or not dataset["labels"]:
                raise ValidationError("an idx dataset needs 'images' and 'labels' paths")
        else:
            raise ValidationError(f"dataset.kind must be 'synthetic' or 'idx', got {dataset['kind']!r}")

        split = _take(top["split"], "split", SPLIT_KEYS)
        if split["mode"] not in SPLIT_MODES:
            raise ValidationError(f"split.mode must be one of {SPLIT_MODES}")
        if not 0 < float(split["test_fraction"]) < 1:
            raise ValidationError("split.test_fraction must lie in (0, 1)")

        reps_raw = top["representations"]
        if not reps_raw or not isinstance(reps_raw, list):
            raise ValidationError("'representations' must be a non-empty list")
        reps = []
        for i, r in enumerate(reps_raw):
            r = _take(r, f"representations[{i}]", REPRESENTATION_KEYS)
            if r["task"] not in TASK_KINDS:
                raise ValidationError(f"representations[{i}].task must be one of {TASK_KINDS}")
            r["name"] = str(r["name"] or r["task"])
            if r["auxiliary"] is not None:
                r["auxiliary"] = _take(r["auxiliary"], f"representations[{i}].auxiliary", DATASET_KEYS)
                if r["task"] == "supervised_baseline":
                    raise ValidationError("the supervised baseline trains on the split, not on auxiliary data")
            reps.append(RepresentationConfig(**r))
        names = [r.name for r in reps]
        if len(set(names)) != len(names):
            raise ValidationError(f"representation names must be unique, got {names}")
        if any(r.task == "supervised_baseline" for r in reps) and not float(split["anomaly_pool_fraction"]) > 0:
            raise ValidationError("a supervised_baseline representation needs split.anomaly_pool_fraction > 0")

        distill = _take(top["distill"], "distill", DISTILL_KEYS)
        probe = _take(top["probe"], "probe", PROBE_KEYS)
        brittle = _take(top["brittleness"], "brittleness", BRITTLENESS_KEYS)
        encoder = _take(top["encoder"], "encoder", ENCODER_KEYS)
        patches = _take(top["patches"], "patches", PATCH_KEYS)
        if (patches["size"] is None) != (patches["stride"] is None):
            raise ValidationError("patches needs both 'size' and 'stride'")
        cfg = cls(int(top["seed"]), dataset, split, reps, list(detectors), distill, probe, brittle, encoder,
                  patches, str(top["output_dir"]), bool(top["resume"]))
        try:
            cfg.distill_config(0)
            for r in reps:
                r.aux_task(0)
        except ValueError as exc:
            raise ValidationError(str(exc)) from None
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        if not path.exists():
            raise NotFoundError(f"config file not found: {path}")
        with open(path) as f:
            raw = yaml.safe_load(f)
        if not isinstance(raw, dict):
            raise ValidationError(f"{path} does not contain a mapping")
        return cls.from_dict(raw)

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["representations"] = [r.__dict__ for r in self.representations]
        return d

    def with_overrides(self, seed: Optional[int] = None, output_dir: Optional[str] = None) -> "ExperimentConfig":
        raw = self.to_dict()
        if seed is not None:
            raw["seed"] = seed
        if output_dir is not None:
            raw["output_dir"] = str(output_dir)
        return ExperimentConfig.from_dict(raw)

    def representation(self, name: str) -> RepresentationConfig:
        for r in self.representations:
            if r.name == name:
                return r
        raise ValidationError(f"no representation named {name!r}")

    def representation_seed(self, name: str) -> int:
        return derive_seed(self.seed, "representation", name)

    def distill_config(self, seed: int) -> DistillConfig:
        d = self.distill
        return DistillConfig(lr=float(d["lr"]), epochs=int(d["epochs"]), batch_size=int(d["batch_size"]),
                             seed=seed, augmentation=d["augmentation"])

    def encoder_specs(self):
        return default_encoder(int(self.encoder["proj_dim"]), tuple(int(w) for w in self.encoder["widths"]))

    def dataset_name(self) -> str:
        return str(self.dataset["name"] or self.dataset["kind"])


# -- data preparation ------------------------------------------------------------------------

def load_dataset(section: dict, default_seed: int, default_name: str) -> LabeledDataset:
    name = str(section.get("name") or default_name)
    if section["kind"] == "idx":
        return load_idx(section["images"], section["labels"], name=name)
    seed = default_seed if section.get("seed") is None else int(section["seed"])
    config = SyntheticConfig(classes=section["classes"], samples_per_class=int(section["samples_per_class"]),
                             image_size=int(section["image_size"]), seed=seed, noise=float(section["noise"]),
                             name=name)
    return generate_synthetic(config)


@dataclass
class ExperimentData:
    dataset: LabeledDataset
    split: SplitPlan
    train: LabeledDataset
    test_images: np.ndarray
    test_targets: np.ndarray
    pool: Optional[LabeledDataset]
    patch: Optional[tuple] = None

    def training_view(self, ds: LabeledDataset) -> LabeledDataset:
        if self.patch is None:
            return ds
        return patchify_dataset(ds, *self.patch)[0]


def prepare_data(cfg: ExperimentConfig) -> ExperimentData:
    ds = load_dataset(cfg.dataset, derive_seed(cfg.seed, "dataset"), cfg.dataset_name())
    s = cfg.split
    plan = build_split(ds, s["mode"], int(s["class_id"]), test_fraction=float(s["test_fraction"]),
                       seed=derive_seed(cfg.seed, "split"), balance=bool(s["balance"]),
                       anomaly_pool_fraction=float(s["anomaly_pool_fraction"]),
                       anomaly_class=s["anomaly_class"])
    plan.validate(ds)
    images, targets = plan.test_view(ds)
    pool = plan.pool_view(ds) if len(plan.anomaly_pool) else None
    patch = None
    if cfg.patches["size"] is not None:
        patch = (int(cfg.patches["size"]), int(cfg.patches["stride"]))
    return ExperimentData(ds, plan, plan.train_view(ds), images, targets, pool, patch)


# -- per-representation pipeline -----------------------------------------------------------

def _config_digest(*parts) -> str:
    blob = json.dumps(parts, sort_keys=True, default=str).encode()
    return hashlib.blake2b(blob, digest_size=16).hexdigest()


class RepresentationPipeline:
    """Teacher, student and scores for one representation of an experiment."""

    def __init__(self, cfg: ExperimentConfig, rep: RepresentationConfig, data: Optional[ExperimentData] = None):
        self.cfg = cfg
        self.rep = rep
        self.data = data if data is not None else prepare_data(cfg)
        self.seed = cfg.representation_seed(rep.name)
        self.out = Path(cfg.output_dir)
        self.digest = _config_digest(cfg.seed, cfg.dataset, cfg.split, cfg.encoder, cfg.patches, rep.__dict__)

    @property
    def teacher_path(self) -> Path:
        return self.out / "checkpoints" / f"{self.rep.name}.teacher.ckpt"

    @property
    def student_path(self) -> Path:
        return self.out / "checkpoints" / f"{self.rep.name}.student.ckpt"

    def _resumable(self, path: Path, digest: str) -> bool:
        if not self.cfg.resume or not path.exists():
            return False
        try:
            _, prov = load_checkpoint(path)
        except Exception:
            return False
        return prov.get("config_digest") == digest

    def teacher(self) -> Teacher:
        if self.rep.load is not None:
            path = Path(self.rep.load)
            if not path.exists():
                raise NotFoundError(f"teacher checkpoint not found: {path}")
            teacher = Teacher.load(path)
            self._check_input_shape(teacher)
            return teacher
        if self._resumable(self.teacher_path, self.digest):
            return Teacher.load(self.teacher_path)
        teacher = self._train_teacher()
        self.teacher_path.parent.mkdir(parents=True, exist_ok=True)
        save_checkpoint(teacher.model, self.teacher_path,
                        {"task": teacher.task.as_dict(), "history": teacher.history,
                         "train_accuracy": teacher.train_accuracy, "representation": self.rep.name,
                         "config_digest": self.digest})
        return teacher

    def _check_input_shape(self, teacher: Teacher) -> None:
        expected = self.data.training_view(self.data.train).image_shape
        if tuple(teacher.model.input_shape) != tuple(expected):
            raise CompatibilityError(f"teacher expects inputs {teacher.model.input_shape}, data has {expected}")

    def _train_teacher(self) -> Teacher:
        task = self.rep.aux_task(derive_seed(self.seed, "pretrain"))
        encoder = self.cfg.encoder_specs()
        data = self.data
        if self.rep.auxiliary is not None:
            source = load_dataset(self.rep.auxiliary, derive_seed(self.seed, "auxiliary"),
                                  f"{self.rep.name}-auxiliary").as_auxiliary()
        else:
            source = data.train
        source = data.training_view(source)
        pool = data.training_view(data.pool) if data.pool is not None else None
        return pretrain(self.rep.task, source, task, encoder, anomalies=pool)

    def pair(self, teacher: Optional[Teacher] = None) -> StudentTeacherPair:
        teacher = teacher or self.teacher()
        digest = _config_digest(self.digest, self.cfg.distill, teacher.model.param_hash())
        if self._resumable(self.student_path, digest):
            student, prov = load_checkpoint(self.student_path, (teacher.model.specs, teacher.model.input_shape))
            return StudentTeacherPair(student, teacher, list(prov.get("history", [])))
        pair = make_pair(teacher, derive_seed(self.seed, "student-init"))
        train_student(pair, self.data.training_view(self.data.train),
                      self.cfg.distill_config(derive_seed(self.seed, "distill")))
        self.student_path.parent.mkdir(parents=True, exist_ok=True)
        save_checkpoint(pair.student, self.student_path,
                        {"history": pair.history, "representation": self.rep.name, "config_digest": digest})
        return pair

    def _per_image(self, per_input: np.ndarray, owners: Optional[np.ndarray]) -> np.ndarray:
        if owners is None:
            return per_input
        out = np.full(owners.max() + 1, -np.inf)
        np.maximum.at(out, owners, per_input)
        return out

    def scores(self, pair: StudentTeacherPair, detectors: Sequence[str]) -> Dict[str, np.ndarray]:
        """Per-test-image anomaly scores for each detector (patch maxima in patch mode)."""
        data = self.data
        owners = None
        test = data.test_images
        if data.patch is not None:
            test, owners = patchify(test, *data.patch)
        out = {}
        shallow = [d for d in detectors if d != "kd"]
        if shallow:
            train_feats = pair.teacher.features(data.training_view(data.train).images)
            test_feats = pair.teacher.features(test)
        for det in detectors:
            if det == "kd":
                s = kd_scores(pair, test)
            elif det == "mse":
                s = mse_center_score(fit_gaussian_stats(train_feats, "diag"), test_feats)
            else:
                mode = det.rsplit("_", 1)[1]
                stats = fit_gaussian_stats(train_feats, mode)
                stats_path = self.out / "stats" / f"{self.rep.name}.{mode}.stats"
                stats_path.parent.mkdir(parents=True, exist_ok=True)
                stats.save(stats_path)
                s = mahalanobis_score(stats, test_feats)
            out[det] = self._per_image(np.asarray(s, dtype=np.float64), owners)
        return out

    def probe_accuracy(self, teacher: Teacher) -> Optional[float]:
        p = self.cfg.probe
        if not p["enabled"] or self.data.patch is not None:
            return None
        ds = self.data.dataset
        rng = make_rng(self.cfg.seed, "probe-split")
        order = rng.permutation(len(ds))
        n_test = max(1, int(round(float(p["test_fraction"]) * len(ds))))
        test, train = ds.subset(order[:n_test]), ds.subset(order[n_test:])
        cfg = ProbeConfig(lr=float(p["lr"]), epochs=int(p["epochs"]), batch_size=int(p["batch_size"]),
                          seed=derive_seed(self.seed, "probe"))
        return linear_probe(teacher, train, test, cfg).accuracy

    def brittleness(self, pair: StudentTeacherPair):
        b = self.cfg.brittleness
        images = self.data.training_view(self.data.train).images
        if b["max_samples"] is not None and len(images) > int(b["max_samples"]):
            idx = np.sort(make_rng(self.seed, "brittleness").choice(len(images), int(b["max_samples"]), replace=False))
            images = images[idx]
        return brittleness_score(pair, images, stop_teacher=bool(b["stop_teacher"]))


@dataclass
class ResultRow:
    dataset: str
    representation: str
    detector: str
    auroc: float
    avg_l2_norm: Optional[float]
    probe_accuracy: Optional[float]
    seed: int
    wall_time_seconds: float

    def __post_init__(self):
        if not 0.0 <= self.auroc <= 1.0:
            raise ValidationError(f"auroc {self.auroc} outside [0, 1]")
        if self.avg_l2_norm is not None and self.avg_l2_norm < 0:
            raise ValidationError("avg_l2_norm must be non-negative")


def run_representation(cfg: ExperimentConfig, name: str, data: Optional[ExperimentData] = None) -> List[ResultRow]:
    start = time.perf_counter()
    pipe = RepresentationPipeline(cfg, cfg.representation(name), data)
    teacher = pipe.teacher()
    pair = pipe.pair(teacher)
    scores = pipe.scores(pair, cfg.detectors)
    l2 = None
    if cfg.brittleness["enabled"]:
        try:
            l2 = pipe.brittleness(pair).numerator
        except DegenerateVarianceError:
            l2 = None
    probe = pipe.probe_accuracy(teacher)
    elapsed = time.perf_counter() - start
    targets = pipe.data.test_targets
    return [ResultRow(cfg.dataset_name(), name, det, auroc(ScoreSet.from_targets(scores[det], targets)), l2, probe,
                      pipe.seed, elapsed) for det in cfg.detectors]


def _run_one(args):
    cfg, name = args
    return run_representation(cfg, name)


def run_experiment(cfg: ExperimentConfig, jobs: int = 1) -> List[ResultRow]:
    """Run every representation and return rows in config order."""
    names = [r.name for r in cfg.representations]
    Path(cfg.output_dir).mkdir(parents=True, exist_ok=True)
    if jobs > 1 and len(names) > 1:
        prepare_data(cfg)  # fail fast on bad data/split settings before forking
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            parts = list(pool.map(_run_one, [(cfg, n) for n in names]))
    else:
        data = prepare_data(cfg)
        parts = [run_representation(cfg, n, data) for n in names]
    return [row for part in parts for row in part]


# -- reports ---------------------------------------------------------------------------------

def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_results(rows: Sequence[ResultRow], path, include_wall_time: bool = True) -> None:
    columns = RESULT_COLUMNS if include_wall_time else RESULT_COLUMNS[:-1]
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(getattr(r, c)) for c in columns])


def read_results(path) -> List[ResultRow]:
    path = Path(path)
    if not path.exists():
        raise NotFoundError(f"results file not found: {path}")
    rows = []
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if tuple(reader.fieldnames or ()) != RESULT_COLUMNS:
            raise ValidationError(f"{path} does not have the results header {','.join(RESULT_COLUMNS)}")
        for rec in reader:
            opt = lambda v: None if v == "" else float(v)  # noqa: E731
            rows.append(ResultRow(rec["dataset"], rec["representation"], rec["detector"], float(rec["auroc"]),
                                  opt(rec["avg_l2_norm"]), opt(rec["probe_accuracy"]), int(rec["seed"]),
                                  float(rec["wall_time_seconds"])))
    return rows


def scatter_table(rows: Sequence[ResultRow]) -> List[dict]:
    """One record per representation pairing its detector AUROCs and diagnostics."""
    table: Dict[str, dict] = {}
    for r in rows:
        rec = table.setdefault(r.representation, {c: None for c in SCATTER_COLUMNS})
        rec["representation"] = r.representation
        if r.detector == "mahalanobis_full":
            rec["mahalanobis_full_auroc"] = r.auroc
        elif r.detector == "kd":
            rec["kd_auroc"] = r.auroc
        if r.avg_l2_norm is not None:
            rec["avg_l2_norm"] = r.avg_l2_norm
        if r.probe_accuracy is not None:
            rec["probe_accuracy"] = r.probe_accuracy
    return list(table.values())


def correlations(rows: Sequence[ResultRow]) -> Dict[str, Optional[float]]:
    """Pearson correlation of KD AUROC with Mahalanobis AUROC, L2 norm and probe accuracy."""
    table = scatter_table(rows)
    out = {}
    for key in ("mahalanobis_full_auroc", "avg_l2_norm", "probe_accuracy"):
        pairs = [(t[key], t["kd_auroc"]) for t in table if t[key] is not None and t["kd_auroc"] is not None]
        try:
            out[key] = pearson_corr([p[0] for p in pairs], [p[1] for p in pairs]) if len(pairs) >= 2 else None
        except DegenerateVarianceError:
            out[key] = None
    return out


def emit_report(rows: Sequence[ResultRow], out_dir) -> Dict[str, Path]:
    """Write results.csv, scatter.csv and correlations.txt into ``out_dir``."""
    if not rows:
        raise ValidationError("no result rows to report")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"results": out / "results.csv", "scatter": out / "scatter.csv",
             "correlations": out / "correlations.txt"}
    write_results(rows, paths["results"])
    with open(paths["scatter"], "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(SCATTER_COLUMNS)
        for rec in scatter_table(rows):
            w.writerow([_fmt(rec[c]) for c in SCATTER_COLUMNS])
    labels = {"mahalanobis_full_auroc": "rho(mahalanobis_full_auroc, kd_auroc)",
              "avg_l2_norm": "rho(avg_l2_norm, kd_auroc)",
              "probe_accuracy": "rho(probe_accuracy, kd_auroc)"}
    with open(paths["correlations"], "w") as f:
        for key, rho in correlations(rows).items():
            f.write(f"{labels[key]} = {'nan' if rho is None else repr(rho)}\n")
    return paths
