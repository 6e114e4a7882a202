"""Anomaly detection on images: dual-attention reconstruction of frozen
multi-scale features, with per-scale normalizing flows scoring the joint
(prior, reconstruction) feature distribution."""

from .checkpoint import load_checkpoint, save_checkpoint
from .config import (RunConfig, apply_overrides, default_run_config,
                     load_run_config, render_run_config)
from .data import DatasetSpec, Sample, generate, load, test_split, train_split
from .errors import (CheckpointError, ContractError, DataError, NumericError,
                     ShapeError)
from .metrics import EvalReport, au_pro, auroc, evaluate, spro
from .pipeline import Model, TrainConfig, build_model, switch_variant, train
from .scoring import MODES, AnomalyMap, ScoringConfig, anomaly_map
from .selftest import run_selftest

__version__ = "0.1.0"

__all__ = [
    "AnomalyMap", "CheckpointError", "ContractError", "DataError",
    "DatasetSpec", "EvalReport", "MODES", "Model",
    "NumericError", "RunConfig", "Sample", "ScoringConfig", "ShapeError",
    "TrainConfig", "anomaly_map", "apply_overrides", "au_pro", "auroc",
    "build_model", "default_run_config", "evaluate", "generate", "load",
    "load_checkpoint", "load_run_config", "render_run_config",
    "run_selftest", "save_checkpoint", "spro", "switch_variant",
    "test_split", "train", "train_split",
]
