"""Federated prompt learning with attention-based aggregation (desk scale)."""

from .config import ExperimentConfig, load_config
from .encoder import BackboneParams, ModelConfig, PromptSet
from .federation import run_experiment, run_round
from .local_training import TrainConfig

__all__ = [
    "BackboneParams",
    "ExperimentConfig",
    "ModelConfig",
    "PromptSet",
    "TrainConfig",
    "load_config",
    "run_experiment",
    "run_round",
]
__version__ = "0.1.0"
