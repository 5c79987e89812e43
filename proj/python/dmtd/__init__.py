"""Direct multi-token decoding: cyclical-mask training and cycle-based generation."""

from fractions import Fraction

from . import _core
from ._core import (
    ChecksumError,
    ConfigError,
    DataError,
    Error,
    Model,
    ModelConfig,
    NumericError,
    TokenIndexError,
    cycle_mask,
    detokenize,
    fit_scaling_law,
    load_checkpoint,
    run_cli,
    tokenize,
)

__all__ = [
    "ChecksumError",
    "ConfigError",
    "DataError",
    "Error",
    "Model",
    "ModelConfig",
    "NumericError",
    "TokenIndexError",
    "cycle_mask",
    "detokenize",
    "fit_scaling_law",
    "load_checkpoint",
    "plt_theoretical",
    "run_cli",
    "tokenize",
]


def plt_theoretical(n_layers, reused_layers, tau):
    """Exact fraction of layers a generated token traverses."""
    return Fraction(*_core.plt_theoretical(n_layers, reused_layers, tau))
