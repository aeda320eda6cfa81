"""Hessian-free certified unlearning with per-sample recollection vectors."""

__version__ = "0.1.0"

from .data import Dataset, build_schedule, load_csv, load_idx, make_synthetic, restrict
from .errors import ConfigError, DigestMismatchError, DivergenceError, FormatError, HFUnlearnError, PreconditionError
from .model import ModelSpec, Params, init_params
from .recollection import ApproximatorStore, RecollectionConfig, recollect_from_trajectory, recollect_streaming
from .trainer import TrainConfig, retrain, train
from .unlearn import PrivacyBudget, SensitivityEstimate, unlearn, unlearn_sequential

__all__ = [
    "ApproximatorStore", "ConfigError", "Dataset", "DigestMismatchError", "DivergenceError", "FormatError",
    "HFUnlearnError", "ModelSpec", "Params", "PreconditionError", "PrivacyBudget", "RecollectionConfig",
    "SensitivityEstimate", "TrainConfig", "build_schedule", "init_params", "load_csv", "load_idx",
    "make_synthetic", "recollect_from_trajectory", "recollect_streaming", "restrict", "retrain", "train",
    "unlearn", "unlearn_sequential",
]
