"""Hybrid CNN-Transformer classifiers for binary skin-lesion triage, on a small numpy autodiff engine."""

__version__ = "0.1.0"

from .models import ModelConfig, ParallelFusionModel, SequentialHybridModel, build_model, predict
from .tensor import Tensor, backward, no_grad

__all__ = [
    "ModelConfig",
    "ParallelFusionModel",
    "SequentialHybridModel",
    "Tensor",
    "backward",
    "build_model",
    "no_grad",
    "predict",
]
