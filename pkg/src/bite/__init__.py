"""Dual-stream time-frequency EEG classifier with a bidirectional TCN.

Submodules: ``tensor`` (reverse-mode autodiff), ``signal`` (STFT and
Euclidean Alignment), ``model``, ``training``, ``data`` (file formats and
synthetic generators), ``verify`` and ``cli``.
"""

from .errors import BiteError, ConfigError, DataError
from .model import ABLATIONS, BiteConfig, BiteModel, parameter_count, reference_config
from .training import EvalReport, TrainConfig, train_and_eval

__version__ = "0.1.0"

__all__ = [
    "ABLATIONS", "BiteConfig", "BiteError", "BiteModel", "ConfigError", "DataError",
    "EvalReport", "TrainConfig", "parameter_count", "reference_config", "train_and_eval",
]
