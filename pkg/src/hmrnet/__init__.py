"""Hierarchical modular routing for multi-domain object detection, in numpy."""

from .errors import (ConfigurationError, DimensionError, DivergenceError, HMRError, InfeasibleError,
                     ParameterError, StateError, UsageError, ValidationError)
from .model import HMRNet, ModelConfig
from .train import TrainConfig, staged_train

__version__ = "0.1.0"

__all__ = [
    "HMRNet", "ModelConfig", "TrainConfig", "staged_train",
    "HMRError", "ConfigurationError", "DimensionError", "DivergenceError", "InfeasibleError",
    "ParameterError", "StateError", "UsageError", "ValidationError",
]
