"""Recurrent language models with an optional dual (input-to-output) connection."""

from .model import Checkpoint, ModelConfig, ParamStore, build, param_count
from .tensor import RngStream, Tensor

__all__ = ["Checkpoint", "ModelConfig", "ParamStore", "RngStream", "Tensor", "build", "param_count"]
__version__ = "0.1.0"
