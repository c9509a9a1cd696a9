"""Dense-attention fusion of low-resolution hyperspectral and high-resolution multispectral images."""

__version__ = "0.1.0"

from .cube import HsiCube
from .losses import LossConfig, total_loss
from .metrics import evaluate
from .model import HyFusion, ModelConfig, fuse, param_count
from .train import TrainConfig, train

__all__ = ["HsiCube", "HyFusion", "LossConfig", "ModelConfig", "TrainConfig", "evaluate", "fuse",
           "param_count", "total_loss", "train", "__version__"]
