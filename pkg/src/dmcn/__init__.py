"""Deep memory connected network for single-image super-resolution."""

from .errors import CheckpointFormatError, ContractError
from .model import ModelConfig, build_model, count_layers, estimate_flops, forward
from .tensor import GradTape, Tensor

__all__ = [
    "CheckpointFormatError",
    "ContractError",
    "GradTape",
    "ModelConfig",
    "Tensor",
    "build_model",
    "count_layers",
    "estimate_flops",
    "forward",
]
