"""attsf: attention-based dual-pixel defocus deblurring."""

from .autodiff import Rng, ShapeError, Variable, backward
from .data import DualPixelSample, PatchSpec, SynthConfig
from .metrics import LossConfig, composite_loss, mae, psnr, ssim
from .model import AttsfModel, ConfigError, ModelConfig, attsf_forward
from .training import (CheckpointError, PhaseConfig, TrainConfig,
                       TrainingError, checkpoint_load, checkpoint_save,
                       lr_schedule, train)

__version__ = "0.1.0"

__all__ = [
    "AttsfModel", "CheckpointError", "ConfigError", "DualPixelSample",
    "LossConfig", "ModelConfig", "PatchSpec", "PhaseConfig", "Rng",
    "ShapeError", "SynthConfig", "TrainConfig", "TrainingError", "Variable",
    "attsf_forward", "backward", "checkpoint_load", "checkpoint_save",
    "composite_loss", "lr_schedule", "mae", "psnr", "ssim", "train",
]
