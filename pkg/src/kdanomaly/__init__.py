"""One-class anomaly detection by distilling frozen teacher representations."""

from .datasets import LabeledDataset, SplitPlan, SyntheticConfig, build_split, generate_synthetic
from .distill import DistillConfig, StudentTeacherPair, kd_score, kd_scores, make_pair, train_student
from .errors import KDError
from .estimators import GaussianAnomalyDetector, KDAnomalyDetector, TeacherFeatures
from .pretrain import AuxTask, Teacher, pretrain

__version__ = "0.1.0"

__all__ = [
    "AuxTask",
    "DistillConfig",
    "GaussianAnomalyDetector",
    "KDAnomalyDetector",
    "KDError",
    "LabeledDataset",
    "SplitPlan",
    "StudentTeacherPair",
    "SyntheticConfig",
    "Teacher",
    "TeacherFeatures",
    "build_split",
    "generate_synthetic",
    "kd_score",
    "kd_scores",
    "make_pair",
    "pretrain",
    "train_student",
]
