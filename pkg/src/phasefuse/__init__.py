"""Phase-based image enhancement and dual-branch parallel-attention fusion."""

from .enhance import EnhancementConfig, MultiFeatureImage, enhance
from .errors import ConfigError, ContractError, DataError, FormatError, NumericError, PhaseFuseError, ShapeError
from .model import FusionModel, ModelConfig
from .training import TrainConfig

__version__ = "0.1.0"

__all__ = [
    "EnhancementConfig", "MultiFeatureImage", "enhance", "FusionModel", "ModelConfig", "TrainConfig",
    "PhaseFuseError", "ConfigError", "ContractError", "DataError", "FormatError", "NumericError", "ShapeError",
]
