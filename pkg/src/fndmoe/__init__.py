"""Multimodal fusion with pairwise cross-attention and two-pass gated feature selection."""

from .data import FeatureRecord, SyntheticConfig, chronological_split, generate_synthetic, load_features
from .errors import ConfigError, DataError, FndMoeError, InternalError, InvalidArgumentError, ShapeError
from .gating import GATE_MODES, GateConfig
from .model import ModelConfig, forward, forward_batch, init_params
from .tensor import Tensor, check_gradients
from .training import Metrics, TrainConfig, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "DataError", "FeatureRecord", "FndMoeError", "GATE_MODES", "GateConfig", "InternalError",
    "InvalidArgumentError", "Metrics", "ModelConfig", "ShapeError", "SyntheticConfig", "Tensor", "TrainConfig",
    "check_gradients", "chronological_split", "evaluate", "forward", "forward_batch", "generate_synthetic",
    "init_params", "load_features", "train",
]
