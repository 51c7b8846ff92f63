"""AdamW and the trainer's configuration record."""

from dataclasses import dataclass, field
from typing import Dict, Mapping, Tuple

import numpy as np

from ..core.store import ParameterStore
from ..errors import ContractViolationError
from ..flow.field import CfgParams, TimestepSamplerConfig


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    batch_size: int = 16
    max_iterations: int = 2000
    seed: int = 0
    guidance: CfgParams = field(default_factory=CfgParams)
    timesteps: TimestepSamplerConfig = field(default_factory=TimestepSamplerConfig)
    objective: str = "meanflow"
    euler_steps: int = 10
    actor_loss_weight: float = 0.0
    checkpoint_every: int = 200

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.objective not in ("meanflow", "rectified"):
            raise ValueError(f"unknown objective '{self.objective}'")


@dataclass
class StepResult:
    loss: float
    k: int = 1
    parts: Dict[str, float] = field(default_factory=dict)


@dataclass
class AdamState:
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    def to_arrays(self) -> Dict[str, np.ndarray]:
        arrays = {f"adam_m/{name}": value for name, value in self.m.items()}
        arrays.update({f"adam_v/{name}": value for name, value in self.v.items()})
        return arrays

    @classmethod
    def from_arrays(cls, step: int, arrays: Mapping[str, np.ndarray]) -> "AdamState":
        m = {k[len("adam_m/"):]: np.array(v) for k, v in arrays.items() if k.startswith("adam_m/")}
        v = {k[len("adam_v/"):]: np.array(a) for k, a in arrays.items() if k.startswith("adam_v/")}
        return cls(step, m, v)


def adamw_step(
    params: ParameterStore,
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    cfg: TrainConfig,
) -> AdamState:
    """One bias-corrected Adam update with decoupled weight decay, in place."""
    if set(grads) != set(params):
        missing = sorted(set(params) ^ set(grads))
        raise ContractViolationError(f"gradient keys do not match parameters: {missing[:5]}")
    beta1, beta2 = cfg.betas
    state.step += 1
    correction1 = 1.0 - beta1**state.step
    correction2 = 1.0 - beta2**state.step
    for name in params:
        g = grads[name]
        m = beta1 * state.m.get(name, np.zeros_like(g)) + (1.0 - beta1) * g
        v = beta2 * state.v.get(name, np.zeros_like(g)) + (1.0 - beta2) * g * g
        state.m[name], state.v[name] = m, v
        current = params[name].data
        update = cfg.lr * (m / correction1) / (np.sqrt(v / correction2) + cfg.eps)
        params.assign(name, current - cfg.lr * cfg.weight_decay * current - update)
    return state
