"""bnc: trainable binaural speech codec with low-bitrate streaming."""

from .codec import CodeGrid, Codebooks, ModelConfig
from .model import BinauralCodec
from .objectives import LossReport, LossWeights
from .spatialsim import PoseTrack, RoomSpec
from .tensor import Tensor, backward, grad_check, no_grad, scoped_tape
from .trainer import TrainConfig, Trainer

__version__ = "0.1.0"

__all__ = [
    "BinauralCodec", "CodeGrid", "Codebooks", "LossReport", "LossWeights",
    "ModelConfig", "PoseTrack", "RoomSpec", "Tensor", "TrainConfig", "Trainer",
    "backward", "grad_check", "no_grad", "scoped_tape", "__version__",
]
