"""Instance-conditioned text and image prompts for a frozen mock dual encoder."""

from .backbone import BackboneConfig, CacheStore, FrozenBackbone, build_backbone
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ExperimentConfig, config_reference, load_config, parse_config
from .data import DataSpec, build_dataset
from .errors import (ConfigurationError, ContractError, DeterminismError, DimensionError,
                     IntegrityError, MugcpError, NonFiniteError, TrainingDiverged)
from .model import MuGCP
from .objectives import LossConfig
from .state import PromptConfig, PromptState
from .tensor import Tape, Tensor, precision
from .trainer import TrainConfig, harmonic_mean, run_ablation_grid, run_experiment

__version__ = "0.1.0"

__all__ = [
    "BackboneConfig", "CacheStore", "FrozenBackbone", "build_backbone",
    "load_checkpoint", "save_checkpoint",
    "ExperimentConfig", "config_reference", "load_config", "parse_config",
    "DataSpec", "build_dataset",
    "ConfigurationError", "ContractError", "DeterminismError", "DimensionError",
    "IntegrityError", "MugcpError", "NonFiniteError", "TrainingDiverged",
    "MuGCP", "LossConfig", "PromptConfig", "PromptState",
    "Tape", "Tensor", "precision",
    "TrainConfig", "harmonic_mean", "run_ablation_grid", "run_experiment",
]
