"""Single-update training steps for the offline generator, the toy field and the VAE."""

from typing import Optional, Union

import numpy as np

from ..autodiff import backward
from ..data.tokens import TokenBatch
from ..flow.field import meanflow_loss, objective_timesteps, sample_timesteps
from ..nn.models import NULL_LABEL, Condition, ReMFlow, ToyVelocityField
from ..nn.vae import MotionVAE, vae_loss
from .optim import AdamState, StepResult, TrainConfig, adamw_step


def remflow_train_step(
    model: ReMFlow,
    batch: TokenBatch,
    state: AdamState,
    cfg: TrainConfig,
    rng: np.random.Generator,
) -> StepResult:
    """Guided MeanFlow loss over every reactor token with the full actor in view."""
    timesteps = objective_timesteps(cfg.timesteps, cfg.objective)
    dropped = rng.random(batch.batch) < cfg.guidance.p_drop
    r, t = sample_timesteps(timesteps, rng, batch.batch)
    eps = rng.standard_normal(batch.reactor.shape)

    cond = Condition(batch.labels, actor=batch.actor).drop(dropped)
    loss = meanflow_loss(model, batch.reactor, eps, r, t, cond, cfg.guidance)
    adamw_step(model.params, backward(loss, model.params), state, cfg)
    return StepResult(loss.item())


def toy_train_step(
    model: ToyVelocityField,
    x: np.ndarray,
    state: AdamState,
    cfg: TrainConfig,
    rng: np.random.Generator,
    labels: Optional[np.ndarray] = None,
) -> StepResult:
    """MeanFlow step on plain vectors; guidance applies only when labels are given."""
    x = np.asarray(x, dtype=np.float64)
    batch = x.shape[0]
    timesteps = objective_timesteps(cfg.timesteps, cfg.objective)
    cond, guidance = None, None
    if labels is not None:
        dropped = rng.random(batch) < cfg.guidance.p_drop
        cond = np.where(dropped, NULL_LABEL, np.asarray(labels, dtype=np.int64))
        guidance = cfg.guidance
    r, t = sample_timesteps(timesteps, rng, batch)
    eps = rng.standard_normal(x.shape)

    loss = meanflow_loss(model, x, eps, r, t, cond, guidance)
    adamw_step(model.params, backward(loss, model.params), state, cfg)
    return StepResult(loss.item())


def vae_train_step(
    vae: MotionVAE,
    frames: np.ndarray,
    roles: Union[str, np.ndarray],
    state: AdamState,
    cfg: TrainConfig,
    rng: np.random.Generator,
) -> StepResult:
    loss, parts = vae_loss(vae, frames, roles, rng)
    adamw_step(vae.params, backward(loss, vae.params), state, cfg)
    return StepResult(loss.item(), parts=parts)
