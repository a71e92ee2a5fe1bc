"""Multi-scale patchify capsule network with cross-agreement routing on a numpy autodiff core."""

from mspcaps.capsule import CapsuleSet, car_forward, dynamic_routing, margin_loss, predict, squash
from mspcaps.model import ModelConfig, MSPCaps, build_dr_ablation, build_model, count_params
from mspcaps.tensor import Tensor, backward, no_grad, precision

__all__ = [
    "CapsuleSet",
    "MSPCaps",
    "ModelConfig",
    "Tensor",
    "backward",
    "build_dr_ablation",
    "build_model",
    "car_forward",
    "count_params",
    "dynamic_routing",
    "margin_loss",
    "no_grad",
    "precision",
    "predict",
    "squash",
]
