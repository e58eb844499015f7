"""Test-time adaptation with entropy and PLPD sample selection, on a small numpy MLP."""

from .deyo import AdaptConfig, adapt_batch, ablation_grid, plpd, run_stream, select, weight
from .errors import (
    ConfigurationError,
    DeyoError,
    DimensionError,
    FormatError,
    NumericInputError,
    StateError,
)
from .model import Counters, Model, forward, init_model, pretrain
from .transforms import TransformSpec, apply_transform

__version__ = "0.1.0"

__all__ = [
    "AdaptConfig",
    "ConfigurationError",
    "Counters",
    "DeyoError",
    "DimensionError",
    "FormatError",
    "Model",
    "NumericInputError",
    "StateError",
    "TransformSpec",
    "ablation_grid",
    "adapt_batch",
    "apply_transform",
    "forward",
    "init_model",
    "plpd",
    "pretrain",
    "run_stream",
    "select",
    "weight",
]
