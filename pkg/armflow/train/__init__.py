"""Optimizer, curricula and training strategies."""

from .offline import remflow_train_step, toy_train_step, vae_train_step
from .online import bsce_train_step, gte_train_step, rollout_train_step
from .optim import AdamState, StepResult, TrainConfig, adamw_step
from .runner import STRATEGIES, TrainingRun
from .schedule import BsceSchedule, mix_fraction, scheduled_k

__all__ = [
    "STRATEGIES",
    "AdamState",
    "BsceSchedule",
    "StepResult",
    "TrainConfig",
    "TrainingRun",
    "adamw_step",
    "bsce_train_step",
    "gte_train_step",
    "mix_fraction",
    "remflow_train_step",
    "rollout_train_step",
    "scheduled_k",
    "toy_train_step",
    "vae_train_step",
]
