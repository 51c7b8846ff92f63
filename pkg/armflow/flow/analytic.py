"""Closed-form velocity fields and toy target distributions.

For Gaussian data ``x ~ N(m, s^2)`` and ``eps ~ N(0, 1)`` on the linear path
``z = (1 - t) x + t eps`` the pair ``(x, eps, z)`` is jointly Gaussian with

    Var z      = V = (1 - t)^2 s^2 + t^2
    Cov(eps, z) = t
    Cov(x, z)   = (1 - t) s^2
    E z        = (1 - t) m

so conditioning on ``z`` gives the marginal (posterior-mean) velocity

    v*(z, t) = E[eps - x | z] = (t - (1 - t) s^2) (z - (1 - t) m) / V - m.

At ``t = 1`` this is ``z - m``; for ``m = 0, s = 1`` it vanishes at ``z = 0``.
"""

from dataclasses import dataclass
from typing import Any

import numpy as np

from ..errors import ContractViolationError


def analytic_gaussian_velocity(z: Any, t: Any, data_mean: float, data_std: float) -> np.ndarray:
    if not data_std > 0:
        raise ContractViolationError(f"data_std must be positive, got {data_std}")
    z = np.asarray(z, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    if np.any((t < 0) | (t > 1)):
        raise ContractViolationError("t must lie in [0, 1]")
    s2 = data_std**2
    variance = (1.0 - t) ** 2 * s2 + t**2
    return (t - (1.0 - t) * s2) * (z - (1.0 - t) * data_mean) / variance - data_mean


@dataclass(frozen=True)
class StandardNormal1D:
    mean: float = 0.0
    std: float = 1.0

    @property
    def dim(self) -> int:
        return 1

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return self.mean + self.std * rng.standard_normal((n, 1))


@dataclass(frozen=True)
class GaussianMixture2D:
    """Four equally weighted isotropic components on the corners of a square."""

    offset: float = 2.0
    std: float = 0.5

    @property
    def dim(self) -> int:
        return 2

    @property
    def centers(self) -> np.ndarray:
        o = self.offset
        return np.array([[o, o], [-o, o], [-o, -o], [o, -o]], dtype=np.float64)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        component = rng.integers(0, 4, size=n)
        return self.centers[component] + self.std * rng.standard_normal((n, 2))


TOY_DISTRIBUTIONS = {
    "normal1d": StandardNormal1D,
    "mixture2d": GaussianMixture2D,
}
