"""MeanFlow paths, timestep sampling, regression targets, losses and samplers.

Conventions: the path is linear, ``z_t = (1 - t) x + t eps``, so ``t = 1`` is
pure noise and ``t = 0`` is data, and the conditional velocity is
``v = eps - x``. A *velocity field* is any callable ``field(z, r, t, cond)``
that returns the average velocity over ``[r, t]`` and exposes
``null_condition(cond)`` and ``dropped(cond)`` for guidance.
"""

import logging
from dataclasses import dataclass
from typing import Any, Optional, Protocol, Tuple

import numpy as np
from scipy.special import expit

from ..autodiff import Value, as_array, jvp, no_grad, ops
from ..errors import ContractViolationError, NumericError, ShapeMismatchError

logger = logging.getLogger(__name__)

OBJECTIVES = ("meanflow", "rectified")


class VelocityField(Protocol):
    def __call__(self, z: Any, r: Any, t: Any, cond: Any) -> Any: ...

    def null_condition(self, cond: Any) -> Any: ...

    def dropped(self, cond: Any) -> np.ndarray: ...


@dataclass(frozen=True)
class TimestepPair:
    r: float
    t: float

    def __post_init__(self):
        if not 0.0 <= self.r <= self.t <= 1.0:
            raise ContractViolationError(f"timestep pair must satisfy 0 <= r <= t <= 1, got {self}")


@dataclass(frozen=True)
class TimestepSamplerConfig:
    mu: float = 0.0
    sigma: float = 1.0
    p_instant: float = 0.25

    def __post_init__(self):
        if not 0.0 <= self.p_instant <= 1.0:
            raise ValueError(f"p_instant must lie in [0, 1], got {self.p_instant}")
        if self.sigma <= 0.0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")


@dataclass(frozen=True)
class CfgParams:
    omega: float = 1.8
    p_drop: float = 0.1

    def __post_init__(self):
        if self.omega < 1.0:
            raise ValueError(f"guidance strength omega must be >= 1, got {self.omega}")
        if not 0.0 <= self.p_drop <= 1.0:
            raise ValueError(f"p_drop must lie in [0, 1], got {self.p_drop}")


@dataclass(frozen=True)
class PathSample:
    x: np.ndarray
    eps: np.ndarray
    t: np.ndarray
    z_t: np.ndarray
    v: np.ndarray


def sample_timesteps(
    cfg: TimestepSamplerConfig, rng: np.random.Generator, size: Any = None
) -> Tuple[np.ndarray, np.ndarray]:
    """Draw ordered logit-normal ``(r, t)`` arrays of shape ``size``.

    Two normals are drawn per pair and then one uniform; a pair selected for
    the instantaneous case takes ``r = t`` from the first draw.
    """
    shape = () if size is None else (size if isinstance(size, tuple) else (size,))
    draws = expit(rng.normal(cfg.mu, cfg.sigma, size=(2,) + shape))
    instant = rng.random(shape) < cfg.p_instant
    r = np.where(instant, draws[0], np.minimum(draws[0], draws[1]))
    t = np.where(instant, draws[0], np.maximum(draws[0], draws[1]))
    return r, t


def sample_timestep_pair(cfg: TimestepSamplerConfig, rng: np.random.Generator) -> TimestepPair:
    r, t = sample_timesteps(cfg, rng)
    return TimestepPair(float(r), float(t))


def _per_sample(t: Any, ndim: int) -> np.ndarray:
    """Broadcast a scalar or per-sample time over trailing data axes."""
    t = np.asarray(t, dtype=np.float64)
    return t.reshape(t.shape + (1,) * (ndim - t.ndim))


def _check_same_shape(x: np.ndarray, eps: np.ndarray) -> None:
    if x.shape != eps.shape:
        raise ShapeMismatchError(f"data shape {x.shape} does not match noise shape {eps.shape}")


def interpolate(x: Any, eps: Any, t: Any) -> np.ndarray:
    x, eps = as_array(x), as_array(eps)
    _check_same_shape(x, eps)
    t = _per_sample(t, x.ndim)
    return (1.0 - t) * x + t * eps


def conditional_velocity(x: Any, eps: Any) -> np.ndarray:
    x, eps = as_array(x), as_array(eps)
    _check_same_shape(x, eps)
    return eps - x


def make_path_sample(x: Any, eps: Any, t: Any) -> PathSample:
    x, eps = as_array(x), as_array(eps)
    t = np.asarray(t, dtype=np.float64)
    return PathSample(x, eps, t, interpolate(x, eps, t), conditional_velocity(x, eps))


def meanflow_target(
    model: VelocityField, z_t: Any, r: Any, t: Any, cond: Any, v: Any
) -> Value:
    """``v - (t - r) * d/ds u(z_t + s v, r, t + s)``, gradient-blocked."""
    z_t, v = as_array(z_t), as_array(v)
    r = np.asarray(r, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)

    def field(z, r_, t_):
        return model(z, r_, t_, cond)

    _, tangent = jvp(field, z_t, r, t, v, 0.0, 1.0)
    target = v - _per_sample(t - r, v.ndim) * tangent.data
    return ops.stop_gradient(Value(target))


def guided_velocity(
    model: VelocityField, z_t: Any, t: Any, cond: Any, v: Any, cfg: CfgParams
) -> np.ndarray:
    """Blend ``omega * v + (1 - omega) * u(z_t, t, t | null)``.

    Samples whose condition is already the null condition keep ``v``.
    """
    v = as_array(v)
    if cfg.omega == 1.0:
        return v
    with no_grad():
        u_null = as_array(model(z_t, t, t, model.null_condition(cond)))
    omega = np.where(np.asarray(model.dropped(cond), dtype=bool), 1.0, cfg.omega)
    omega = _per_sample(omega, v.ndim)
    return omega * v + (1.0 - omega) * u_null


def cfg_target(
    model: VelocityField, z_t: Any, r: Any, t: Any, cond: Any, v: Any, cfg: CfgParams
) -> Value:
    v_tilde = guided_velocity(model, z_t, t, cond, v, cfg)
    return meanflow_target(model, z_t, r, t, cond, v_tilde)


def regression_loss(prediction: Value, target: Any) -> Value:
    """Mean squared error; raises with the first non-finite sample index."""
    diff = prediction - ops.stop_gradient(target)
    per_sample = np.square(as_array(diff)).reshape(diff.shape[0], -1).sum(axis=1)
    bad = np.flatnonzero(~np.isfinite(per_sample))
    if bad.size:
        raise NumericError("non-finite loss", index=int(bad[0]))
    return ops.mean(ops.square(diff))


def meanflow_loss(
    model: VelocityField,
    x: Any,
    eps: Any,
    r: Any,
    t: Any,
    cond: Any,
    cfg: Optional[CfgParams] = None,
) -> Value:
    """Squared error between ``u(z_t, r, t)`` and the frozen MeanFlow target."""
    x, eps = as_array(x), as_array(eps)
    if x.shape[0] == 0:
        raise ContractViolationError("meanflow_loss needs a non-empty batch")
    path = make_path_sample(x, eps, t)
    if cfg is None:
        target = meanflow_target(model, path.z_t, r, t, cond, path.v)
    else:
        target = cfg_target(model, path.z_t, r, t, cond, path.v, cfg)
    prediction = model(path.z_t, r, t, cond)
    return regression_loss(prediction, target)


def _times(value: float, batch: int) -> np.ndarray:
    return np.full(batch, value, dtype=np.float64)


def single_step_sample(model: VelocityField, eps: Any, cond: Any) -> np.ndarray:
    """``eps - u(eps, 0, 1)``: one model evaluation."""
    eps = as_array(eps)
    batch = eps.shape[0]
    with no_grad():
        u = model(eps, _times(0.0, batch), _times(1.0, batch), cond)
    return eps - as_array(u)


def multi_step_euler_sample(model: VelocityField, eps: Any, cond: Any, n_steps: int) -> np.ndarray:
    """Integrate ``dz/dt = u(z, t, t)`` from t = 1 to t = 0 in uniform steps."""
    if n_steps < 1:
        raise ContractViolationError(f"n_steps must be >= 1, got {n_steps}")
    z = as_array(eps)
    batch = z.shape[0]
    grid = np.linspace(1.0, 0.0, n_steps + 1)
    with no_grad():
        for t_now, t_next in zip(grid[:-1], grid[1:]):
            u = as_array(model(z, _times(t_now, batch), _times(t_now, batch), cond))
            z = z - (t_now - t_next) * u
    return z


def sample_tokens(
    model: VelocityField,
    eps: Any,
    cond: Any,
    objective: str = "meanflow",
    euler_steps: int = 10,
) -> np.ndarray:
    """Generate with the sampler that matches the training objective."""
    if objective == "meanflow":
        return single_step_sample(model, eps, cond)
    if objective == "rectified":
        return multi_step_euler_sample(model, eps, cond, euler_steps)
    raise ContractViolationError(f"unknown objective '{objective}' (choose from {OBJECTIVES})")


def objective_timesteps(cfg: TimestepSamplerConfig, objective: str) -> TimestepSamplerConfig:
    """The rectified-flow baseline trains only the instantaneous field (r = t)."""
    if objective == "rectified":
        return TimestepSamplerConfig(mu=cfg.mu, sigma=cfg.sigma, p_instant=1.0)
    if objective != "meanflow":
        raise ContractViolationError(f"unknown objective '{objective}' (choose from {OBJECTIVES})")
    return cfg
