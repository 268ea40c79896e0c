"""Causal-intervention weakly supervised sound event detection on a desk-scale benchmark."""

from . import autodiff, causal, features, metrics, model, synthdata, trainer
from .causal import ContextPool, approx_backdoor, enhance, exact_backdoor, pool_update
from .metrics import EvalResult, MetricsConfig, evaluate_predictions
from .model import ModelConfig, SEDModel, init_model, load_checkpoint, save_checkpoint
from .synthdata import GeneratorConfig, emit_dataset
from .trainer import TrainConfig, run_experiment, train_model

__version__ = "0.1.0"

__all__ = [
    "autodiff", "causal", "features", "metrics", "model", "synthdata", "trainer",
    "ContextPool", "approx_backdoor", "enhance", "exact_backdoor", "pool_update",
    "EvalResult", "MetricsConfig", "evaluate_predictions",
    "ModelConfig", "SEDModel", "init_model", "load_checkpoint", "save_checkpoint",
    "GeneratorConfig", "emit_dataset", "TrainConfig", "run_experiment", "train_model",
]
