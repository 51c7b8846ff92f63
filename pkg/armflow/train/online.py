"""Training steps for the online model: BSCE, ground-truth encoding and rollout.

All three strategies draw their main noise in one layout so they can be
compared under a shared seed: the guidance drop mask, then reactor
``(r, t)`` and noise, then actor ``(r, t)`` and noise, each with a depth
axis. Positions and rollout draws come from a separate per-iteration
generator so they never shift the main stream.
"""

import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from ..autodiff import Value, backward, no_grad, ops
from ..data.tokens import TokenBatch
from ..errors import ContractViolationError
from ..flow.field import meanflow_loss, objective_timesteps, sample_timesteps, sample_tokens
from ..nn.cache import ContextBuffer
from ..nn.models import ACTOR, REACTOR, ARMFlow, Condition, PredictorCondition
from .optim import AdamState, StepResult, TrainConfig, adamw_step
from .schedule import BsceSchedule, scheduled_k

logger = logging.getLogger(__name__)

POSITION_STREAM = 1
ROLLOUT_STREAM = 2


@dataclass
class StepNoise:
    dropped: np.ndarray
    r_b: np.ndarray
    t_b: np.ndarray
    eps_b: np.ndarray
    r_a: np.ndarray
    t_a: np.ndarray
    eps_a: np.ndarray

    @classmethod
    def draw(
        cls, rng: np.random.Generator, cfg: TrainConfig, batch: int, depth: int, token_dim: int
    ) -> "StepNoise":
        timesteps = objective_timesteps(cfg.timesteps, cfg.objective)
        dropped = rng.random(batch) < cfg.guidance.p_drop
        r_b, t_b = sample_timesteps(timesteps, rng, (batch, depth))
        eps_b = rng.standard_normal((batch, depth, token_dim))
        r_a, t_a = sample_timesteps(timesteps, rng, (batch, depth))
        eps_a = rng.standard_normal((batch, depth, token_dim))
        return cls(dropped, r_b, t_b, eps_b, r_a, t_a, eps_a)


def side_rng(seed: int, iteration: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([seed, iteration, stream])


def _flat(x: np.ndarray) -> np.ndarray:
    return x.reshape((-1,) + x.shape[2:])


def _stream_losses(
    model: ARMFlow,
    context: Value,
    null_context: np.ndarray,
    actor: np.ndarray,
    reactor: np.ndarray,
    noise: StepNoise,
    cfg: TrainConfig,
) -> Tuple[Value, dict]:
    """Guided MeanFlow loss on the reactor stream, plus the actor stream when weighted in.

    ``context``, ``actor`` and ``reactor`` are flattened to one row per
    (sample, depth) pair.
    """
    depth = noise.r_b.shape[1]
    dropped = np.repeat(noise.dropped, depth)
    reactor_cond = PredictorCondition.build(context, actor, REACTOR, dropped, null_context)
    loss = meanflow_loss(
        model.predictor,
        reactor,
        _flat(noise.eps_b),
        _flat(noise.r_b),
        _flat(noise.t_b),
        reactor_cond,
        cfg.guidance,
    )
    parts = {"reactor": loss.item()}
    if cfg.actor_loss_weight > 0:
        actor_cond = PredictorCondition.build(context, actor, ACTOR, dropped, null_context)
        actor_loss = meanflow_loss(
            model.predictor,
            actor,
            _flat(noise.eps_a),
            _flat(noise.r_a),
            _flat(noise.t_a),
            actor_cond,
            cfg.guidance,
        )
        parts["actor"] = actor_loss.item()
        loss = ops.add(loss, ops.mul(actor_loss, cfg.actor_loss_weight))
    return loss, parts


def _update(model: ARMFlow, loss: Value, state: AdamState, cfg: TrainConfig) -> None:
    grads = backward(loss, model.params)
    adamw_step(model.params, grads, state, cfg)


def _encode(model: ARMFlow, buffer: ContextBuffer, labels: np.ndarray, dropped: np.ndarray):
    """Grad-enabled contexts under the dropped condition, and the null contexts."""
    context = model.encoder.encode(buffer, Condition(labels).drop(dropped))
    with no_grad():
        null_context = model.encoder.encode(buffer, Condition.null(buffer.batch)).data
    return context, null_context


def _bootstrap_history(
    model: ARMFlow, batch: TokenBatch, noise: StepNoise, n_pairs: int, cfg: TrainConfig
) -> Tuple[np.ndarray, np.ndarray]:
    """Self-generated (actor, reactor) history of ``n_pairs`` pairs, gradient-free."""
    b, dim = batch.batch, batch.token_dim
    actor = np.zeros((b, n_pairs, dim))
    reactor = np.zeros((b, n_pairs, dim))
    if n_pairs == 0:
        return actor, reactor
    cond = Condition(batch.labels)
    work = ContextBuffer(b, dim, n_pairs)
    with no_grad():
        cache, context = model.encoder.start(cond)
        for i in range(n_pairs):
            reactor[:, i] = sample_tokens(
                model.predictor,
                noise.eps_b[:, i],
                PredictorCondition.build(context, batch.actor[:, i], REACTOR),
                cfg.objective,
                cfg.euler_steps,
            )
            actor[:, i] = sample_tokens(
                model.predictor,
                noise.eps_a[:, i],
                PredictorCondition.build(context, batch.actor[:, i], ACTOR),
                cfg.objective,
                cfg.euler_steps,
            )
            if i + 1 < n_pairs:
                context = model.encoder.update(work, actor[:, i], reactor[:, i], cache)
    return actor, reactor


def bsce_train_step(
    model: ARMFlow,
    batch: TokenBatch,
    state: AdamState,
    cfg: TrainConfig,
    rng: np.random.Generator,
    schedule: BsceSchedule,
    iteration: int,
) -> StepResult:
    """Bootstrap contextual encoding.

    The first K - 1 history pairs are generated by the model itself (both
    streams), then one causal encode yields the contexts for all K steps and
    the K per-step losses are averaged into a single update.
    """
    k = scheduled_k(iteration, schedule, cfg.max_iterations)
    if k > batch.n_tokens:
        logger.warning("rollout depth %d truncated to sequence length %d", k, batch.n_tokens)
        k = batch.n_tokens
    noise = StepNoise.draw(rng, cfg, batch.batch, k, batch.token_dim)

    history_actor, history_reactor = _bootstrap_history(model, batch, noise, k - 1, cfg)
    buffer = ContextBuffer.from_tokens(
        history_actor, history_reactor, capacity=model.cfg.max_tokens
    )
    context, null_context = _encode(model, buffer, batch.labels, noise.dropped)

    hidden = model.cfg.hidden
    loss, parts = _stream_losses(
        model,
        ops.reshape(context, (batch.batch * k, hidden)),
        null_context.reshape(batch.batch * k, hidden),
        _flat(batch.actor[:, :k]),
        _flat(batch.reactor[:, :k]),
        noise,
        cfg,
    )
    _update(model, loss, state, cfg)
    return StepResult(loss.item(), k, parts)


def _rollout_history(
    model: ARMFlow,
    batch: TokenBatch,
    n_pairs: int,
    mask: np.ndarray,
    eps: np.ndarray,
    cfg: TrainConfig,
) -> np.ndarray:
    """Ground-truth reactor history with masked entries replaced by generations."""
    reactor = batch.reactor[:, :n_pairs].copy()
    cond = Condition(batch.labels)
    work = ContextBuffer(batch.batch, batch.token_dim, n_pairs)
    with no_grad():
        cache, context = model.encoder.start(cond)
        for i in range(n_pairs):
            generated = sample_tokens(
                model.predictor,
                eps[:, i],
                PredictorCondition.build(context, batch.actor[:, i], REACTOR),
                cfg.objective,
                cfg.euler_steps,
            )
            reactor[:, i] = np.where(mask[:, i, None], generated, reactor[:, i])
            if i + 1 < n_pairs:
                context = model.encoder.update(work, batch.actor[:, i], reactor[:, i], cache)
    return reactor


def _positional_step(
    model: ARMFlow,
    batch: TokenBatch,
    state: AdamState,
    cfg: TrainConfig,
    rng: np.random.Generator,
    iteration: int,
    max_position: Optional[int],
    mix: float,
) -> StepResult:
    last = batch.n_tokens - 1
    max_position = last if max_position is None else min(max_position, last)
    if max_position < 0:
        raise ContractViolationError(f"max_position must be >= 0, got {max_position}")
    if not 0.0 <= mix <= 1.0:
        raise ContractViolationError(f"mix fraction must lie in [0, 1], got {mix}")

    noise = StepNoise.draw(rng, cfg, batch.batch, 1, batch.token_dim)
    positions = side_rng(cfg.seed, iteration, POSITION_STREAM).integers(
        0, max_position + 1, batch.batch
    )
    n_pairs = int(positions.max())

    reactor_history = batch.reactor[:, :n_pairs]
    if mix > 0.0 and n_pairs > 0:
        side = side_rng(cfg.seed, iteration, ROLLOUT_STREAM)
        mask = side.random((batch.batch, n_pairs)) < mix
        eps = side.standard_normal((batch.batch, n_pairs, batch.token_dim))
        reactor_history = _rollout_history(model, batch, n_pairs, mask, eps, cfg)

    buffer = ContextBuffer.from_tokens(
        batch.actor[:, :n_pairs], reactor_history, capacity=model.cfg.max_tokens
    )
    context, null_context = _encode(model, buffer, batch.labels, noise.dropped)
    rows = np.arange(batch.batch)
    loss, parts = _stream_losses(
        model,
        ops.getitem(context, (rows, positions)),
        null_context[rows, positions],
        batch.actor[rows, positions],
        batch.reactor[rows, positions],
        noise,
        cfg,
    )
    _update(model, loss, state, cfg)
    return StepResult(loss.item(), 1, parts)


def gte_train_step(
    model: ARMFlow,
    batch: TokenBatch,
    state: AdamState,
    cfg: TrainConfig,
    rng: np.random.Generator,
    iteration: int,
    max_position: Optional[int] = None,
) -> StepResult:
    """Ground-truth history up to a random position per sample, one token loss each."""
    return _positional_step(model, batch, state, cfg, rng, iteration, max_position, 0.0)


def rollout_train_step(
    model: ARMFlow,
    batch: TokenBatch,
    state: AdamState,
    cfg: TrainConfig,
    rng: np.random.Generator,
    iteration: int,
    mix: float,
    max_position: Optional[int] = None,
) -> StepResult:
    """Like :func:`gte_train_step` with each reactor history token generated
    with probability ``mix``; actor history stays ground truth."""
    return _positional_step(model, batch, state, cfg, rng, iteration, max_position, mix)
