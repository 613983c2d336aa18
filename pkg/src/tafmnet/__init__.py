"""Skin-lesion segmentation network with attention bottleneck, focal-modulated skips
and boundary-aware losses, built on a small numpy autodiff core."""
from .estimator import TAFMSegmenter
from .losses import LossSchedule, compute_loss
from .model import ModelConfig, TAFMNet, load_checkpoint, save_checkpoint
from .training import TrainConfig, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "LossSchedule", "ModelConfig", "TAFMNet", "TAFMSegmenter", "TrainConfig", "compute_loss",
    "evaluate", "load_checkpoint", "save_checkpoint", "train",
]
