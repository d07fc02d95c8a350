"""Hybrid CNN + ViT fundus classifier with cross-attention fusion, built on a
small numpy autodiff core."""

from .fusion import HybridModel, ModelConfig, ModelVariant, VariantTag
from .tensor import Tape, Tensor

__all__ = ["HybridModel", "ModelConfig", "ModelVariant", "VariantTag", "Tape", "Tensor"]
__version__ = "0.1.0"
