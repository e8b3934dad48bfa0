"""Adaptive-tokenization spatiotemporal transformers for PDE surrogates, on numpy."""

from .attention import AttentionConfig
from .model import MateyModel, ModelConfig, count_params
from .tokenize import AdaptiveSpec, PatchSpec

__version__ = "0.1.0"

__all__ = ["AdaptiveSpec", "AttentionConfig", "MateyModel", "ModelConfig", "PatchSpec", "count_params"]
