"""LF-YOLO: a lightweight weld-defect detector on a small numpy autodiff core."""

from .errors import (ConfigError, ContractError, FormatError, LFYoloError, ParseError, ShapeError,
                     ValidationError, WeightsError)
from .model import LFYOLO, Detection, ModelConfig, build, detect
from .tensor import GradTape, Tensor, backward

__all__ = [
    "LFYOLO", "Detection", "ModelConfig", "build", "detect", "GradTape", "Tensor", "backward",
    "ConfigError", "ContractError", "FormatError", "LFYoloError", "ParseError", "ShapeError",
    "ValidationError", "WeightsError",
]
__version__ = "0.1.0"
