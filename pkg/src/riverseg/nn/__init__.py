"""Toy-scale fully convolutional segmentation networks on plain numpy.

Submodules: :mod:`layers` (differentiable building blocks), :mod:`models`
(graph assembly for the U-Net / LinkNet / fixed-width families),
:mod:`train` (loss, Adam, training loop), :mod:`checkpoint` (RSWT weights).
"""

from .models import Model, ModelSpec, build_model, count_flops, count_params
from .train import (
    AdamState,
    TrainConfig,
    TrainHistory,
    bce_loss,
    loss_and_grads,
    optimizer_step,
    train,
)
from .checkpoint import load_checkpoint, save_checkpoint

__all__ = [
    "Model", "ModelSpec", "build_model", "count_flops", "count_params",
    "AdamState", "TrainConfig", "TrainHistory", "bce_loss", "loss_and_grads",
    "optimizer_step", "train", "load_checkpoint", "save_checkpoint",
]
