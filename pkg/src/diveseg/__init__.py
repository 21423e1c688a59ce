"""Underwater instance segmentation on a frozen ViT with style and object-prior adaptation."""
from .config import RunConfig, load_config
from .model import DiveSeg, ModelConfig, trainable_parameters

__version__ = "0.1.0"

__all__ = ["DiveSeg", "ModelConfig", "RunConfig", "load_config", "trainable_parameters", "__version__"]
