"""Hybrid CNN-Transformer U-Net for binary wound segmentation.

Everything runs on numpy through a small tape-based autodiff engine
(:mod:`woundseg.tensor`). The model, training loop, metrics, Grad-CAM and
dataset tooling are built on top of it.
"""

from .errors import ConfigError, ContractError, GraphError, ShapeError
from .metrics import MetricConfig, MetricsReport, dice, evaluate, iou, pixel_accuracy
from .model import CAM_LAYERS, ModelConfig, TransUNet, count_params
from .tensor import Tape, Tensor, backward, no_grad, precision
from .transformer import TransformerConfig, patch_count

__version__ = "0.1.0"

__all__ = [
    "CAM_LAYERS",
    "ConfigError",
    "ContractError",
    "GraphError",
    "MetricConfig",
    "MetricsReport",
    "ModelConfig",
    "ShapeError",
    "Tape",
    "Tensor",
    "TransUNet",
    "TransformerConfig",
    "backward",
    "count_params",
    "dice",
    "evaluate",
    "iou",
    "no_grad",
    "patch_count",
    "pixel_accuracy",
    "precision",
]
