"""csai_imputation package."""

from __future__ import annotations

__version__ = "0.1.0"

from .config import ExperimentConfig, load_config
from .csai import CsaiParams, ModelOutput, csai_forward, init_csai_params
from .experiments import ablate, cross_validate, load_dataset
from .masking import MaskPlan, plan_nonuniform_mask, plan_uniform_mask
from .synthetic import generate_synthetic
from .trainer import Metrics, train
from .tsdata import TimeSeriesBatch

__all__ = [
    "__version__",
    "ExperimentConfig",
    "load_config",
    "CsaiParams",
    "ModelOutput",
    "csai_forward",
    "init_csai_params",
    "ablate",
    "cross_validate",
    "load_dataset",
    "MaskPlan",
    "plan_uniform_mask",
    "plan_nonuniform_mask",
    "generate_synthetic",
    "Metrics",
    "train",
    "TimeSeriesBatch",
]
