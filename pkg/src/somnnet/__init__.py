"""SomnNET toolkit: a from-scratch 1-D CNN for per-second apnea detection on
8 Hz SpO2 windows, with magnitude pruning, weight binarization and an
operation/energy accountant."""

from .errors import ConfigError, DigestMismatch, ParameterError, ParseError, ShapeError, TrainingError
from .model import (
    LayerSpec,
    Network,
    NetworkConfig,
    build_reference_network,
    fit,
    forward,
    predict_label,
    predict_proba,
    reference_config,
)

__all__ = [
    "ConfigError", "DigestMismatch", "ParameterError", "ParseError", "ShapeError", "TrainingError",
    "LayerSpec", "Network", "NetworkConfig", "build_reference_network", "fit", "forward",
    "predict_label", "predict_proba", "reference_config",
]
__version__ = "0.1.0"
