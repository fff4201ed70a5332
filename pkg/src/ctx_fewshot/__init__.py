"""Episodic few-shot classification with CrossTransformer and Prototypical heads."""
from .embedder import Embedder, EmbedderConfig
from .model import FewShotModel, HeadConfig
from .tensor import NonFiniteError, ShapeError, Tensor

__version__ = "0.1.0"

__all__ = ["Embedder", "EmbedderConfig", "FewShotModel", "HeadConfig", "NonFiniteError", "ShapeError",
           "Tensor"]
