"""Multiscale metamorphic autoencoder: a generative model that explains each
volume as a coarse-to-fine sequence of intensity and diffeomorphic changes to
a fixed template.
"""

__version__ = "0.1.0"

from .errors import (CheckpointError, ConfigError, DataError, M3AEError, MetricError, NonFiniteError,
                     ShapeError, UsageError, VolumeFormatError)
from .losses import LossWeights
from .network import M3AE, FULL_MODEL, ModelConfig
from .trainer import TrainConfig

__all__ = [
    "M3AE", "ModelConfig", "FULL_MODEL", "LossWeights", "TrainConfig",
    "M3AEError", "ShapeError", "ConfigError", "VolumeFormatError", "CheckpointError",
    "DataError", "NonFiniteError", "MetricError", "UsageError",
]
