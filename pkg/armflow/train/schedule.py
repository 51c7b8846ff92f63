"""Curricula over training iterations: rollout depth K and rollout mixing."""

import math
from dataclasses import dataclass
from typing import Optional, Tuple

from ..errors import ContractViolationError


@dataclass(frozen=True)
class BsceSchedule:
    """Rollout depth curriculum.

    Without ``milestones`` K ramps linearly from 1 to ``k_max`` over the first
    ``ramp_fraction`` of training. ``milestones`` instead lists the training
    fractions at which K steps up by one.
    """

    k_max: int = 8
    ramp_fraction: float = 0.5
    milestones: Optional[Tuple[float, ...]] = None

    def __post_init__(self):
        if self.k_max < 1:
            raise ValueError(f"k_max must be >= 1, got {self.k_max}")
        if not 0.0 < self.ramp_fraction <= 1.0:
            raise ValueError(f"ramp_fraction must lie in (0, 1], got {self.ramp_fraction}")


def _check_iteration(iteration: int, max_iterations: int) -> None:
    if not 0 <= iteration <= max_iterations:
        raise ContractViolationError(
            f"iteration {iteration} outside [0, {max_iterations}]"
        )


def scheduled_k(iteration: int, schedule: BsceSchedule, max_iterations: int) -> int:
    _check_iteration(iteration, max_iterations)
    if iteration == 0 or schedule.k_max == 1:
        return 1
    progress = iteration / max_iterations
    if schedule.milestones is not None:
        passed = sum(1 for m in schedule.milestones if m <= progress)
        return min(1 + passed, schedule.k_max)
    ramp = min(progress / schedule.ramp_fraction, 1.0)
    return min(1 + math.floor(ramp * (schedule.k_max - 1) + 1e-12), schedule.k_max)


def mix_fraction(iteration: int, max_iterations: int, ramp_fraction: float = 0.5) -> float:
    """Share of generated reactor history for progressive rollout, 0 -> 1."""
    _check_iteration(iteration, max_iterations)
    if max_iterations == 0:
        return 0.0
    if ramp_fraction <= 0:
        return 1.0
    return min(iteration / (ramp_fraction * max_iterations), 1.0)
