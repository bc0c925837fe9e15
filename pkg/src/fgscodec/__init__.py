"""Fine-grained scalable learned image compression.

A single encoding pass produces a bitstream that can be truncated at any
scalable-channel boundary; every prefix decodes to a complete image whose
quality grows with the number of channels received.
"""

from fgscodec.config import ModelConfig
from fgscodec.model import ScalableCodec
from fgscodec.training import TrainConfig, Trainer, load_checkpoint, save_checkpoint

__all__ = [
    "ModelConfig",
    "ScalableCodec",
    "TrainConfig",
    "Trainer",
    "load_checkpoint",
    "save_checkpoint",
]

__version__ = "0.1.0"
