"""Hierarchical latent space folding for small decoder-only transformers."""

from .folding import FoldingConfig, FoldingLayer, fold, fold_step
from .model import ModelConfig, forward, init_params, train_step

__all__ = ["FoldingConfig", "FoldingLayer", "fold", "fold_step", "ModelConfig", "forward",
           "init_params", "train_step"]
__version__ = "0.1.0"
