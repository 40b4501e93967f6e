"""Conditional cross-attention (CCA) for attribute-specific multi-space embeddings."""

from .config import EncoderConfig, TrainConfig
from .estimator import CCAEmbedder
from .model import CCAModel, load_model, save_model
from .tensor import Tensor, no_grad

__all__ = [
    "CCAEmbedder",
    "CCAModel",
    "EncoderConfig",
    "Tensor",
    "TrainConfig",
    "load_model",
    "no_grad",
    "save_model",
]
__version__ = "0.1.0"
