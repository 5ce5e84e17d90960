"""Hierarchical place embeddings learned by next-place prediction.

Embedding vectors are split into per-level slices; the slices of upper levels
are periodically averaged over every place inside the same region.  A linear
land-use probe measures what the learned space encodes.
"""
from .errors import ConfigError, DataError, DivergenceError, HierPlaceError
from .grid import GridSpec, HierarchicalVocabulary, Level, build_vocabulary
from .hier_embedding import METHODS, SlicePartition, average_slices
from .kernels import BACKEND
from .model import ModelConfig, NextPlaceModel, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "BACKEND", "ConfigError", "DataError", "DivergenceError", "GridSpec", "HierPlaceError",
    "HierarchicalVocabulary", "Level", "METHODS", "ModelConfig", "NextPlaceModel", "SlicePartition",
    "average_slices", "build_vocabulary", "evaluate", "train",
]
