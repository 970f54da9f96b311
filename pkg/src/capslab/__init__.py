"""capslab: capsule networks with pluggable routing, shared-transform
capsules, manual backprop throughout, and an affine-robustness benchmark."""

from .config import GenConfig, TrainConfig
from .data import AffineParams, AffineRanges, ImageSet
from .model import ModelConfig, model_backward, model_forward
from .routing import (CouplingState, RoutingConfig, agreement_objective,
                      route_dynamic, route_trainable, route_uniform,
                      routing_backward)
from .training import evaluate, train

__version__ = "0.1.0"

__all__ = [
    "AffineParams",
    "AffineRanges",
    "CouplingState",
    "GenConfig",
    "ImageSet",
    "ModelConfig",
    "RoutingConfig",
    "TrainConfig",
    "agreement_objective",
    "evaluate",
    "model_backward",
    "model_forward",
    "route_dynamic",
    "route_trainable",
    "route_uniform",
    "routing_backward",
    "train",
]
