"""Patch classifier, sensitivity maps and SmoothGrad assembly."""
from .network import (
    PARAM_SHAPES,
    PatchClassifier,
    cross_entropy,
    forward,
    forward_batch,
    input_gradient,
    load_checkpoint,
    logit_gradient,
    save_checkpoint,
    save_loss_trace,
    softmax,
    train,
)
from .smoothgrad import SmoothGradConfig, image_saliency, smoothgrad, tile_grid, tile_origins

__all__ = [
    "PARAM_SHAPES",
    "PatchClassifier",
    "SmoothGradConfig",
    "cross_entropy",
    "forward",
    "forward_batch",
    "image_saliency",
    "input_gradient",
    "load_checkpoint",
    "logit_gradient",
    "save_checkpoint",
    "save_loss_trace",
    "smoothgrad",
    "softmax",
    "tile_grid",
    "tile_origins",
    "train",
]
