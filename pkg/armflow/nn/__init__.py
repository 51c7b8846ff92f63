"""Layers, the motion VAE and the velocity networks."""

from .cache import ContextBuffer, KVCache
from .models import (
    ACTOR,
    NULL_LABEL,
    REACTOR,
    ARMFlow,
    Condition,
    ModelConfig,
    PredictorCondition,
    ReMFlow,
    ToyFieldConfig,
    ToyVelocityField,
)
from .vae import LatentSequence, MotionSequence, MotionVAE, VaeConfig

__all__ = [
    "ACTOR",
    "NULL_LABEL",
    "REACTOR",
    "ARMFlow",
    "Condition",
    "ContextBuffer",
    "KVCache",
    "LatentSequence",
    "ModelConfig",
    "MotionSequence",
    "MotionVAE",
    "PredictorCondition",
    "ReMFlow",
    "ToyFieldConfig",
    "ToyVelocityField",
    "VaeConfig",
]
