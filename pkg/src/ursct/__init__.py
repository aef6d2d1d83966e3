"""URSCT: a Swin-Convs transformer U-Net for underwater image enhancement on a numpy autodiff core."""
from .errors import ConfigError, DataError, NumericError, UrsctError, UsageError
from .losses import LossWeights, total_loss
from .model import URSCT, ModelConfig
from .tensor import Tensor, no_grad
from .trainer import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "URSCT",
    "ModelConfig",
    "LossWeights",
    "TrainConfig",
    "Tensor",
    "no_grad",
    "total_loss",
    "train",
    "UrsctError",
    "UsageError",
    "ConfigError",
    "DataError",
    "NumericError",
]
