"""Transformer-based dynamical VAE for speech power spectrograms."""

from .dsp import StftConfig, Waveform
from .model import DVAE, ModelConfig
from .training import OptimizerConfig, TrainConfig, load_checkpoint, train

__version__ = "0.1.0"

__all__ = [
    "DVAE",
    "ModelConfig",
    "OptimizerConfig",
    "StftConfig",
    "TrainConfig",
    "Waveform",
    "load_checkpoint",
    "train",
]
