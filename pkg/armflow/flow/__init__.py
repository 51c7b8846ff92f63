"""MeanFlow objective, guidance and samplers."""

from .analytic import GaussianMixture2D, StandardNormal1D, analytic_gaussian_velocity
from .field import (
    CfgParams,
    PathSample,
    TimestepPair,
    TimestepSamplerConfig,
    cfg_target,
    conditional_velocity,
    interpolate,
    meanflow_loss,
    meanflow_target,
    multi_step_euler_sample,
    sample_timestep_pair,
    sample_timesteps,
    sample_tokens,
    single_step_sample,
)

__all__ = [
    "CfgParams",
    "GaussianMixture2D",
    "PathSample",
    "StandardNormal1D",
    "TimestepPair",
    "TimestepSamplerConfig",
    "analytic_gaussian_velocity",
    "cfg_target",
    "conditional_velocity",
    "interpolate",
    "meanflow_loss",
    "meanflow_target",
    "multi_step_euler_sample",
    "sample_timestep_pair",
    "sample_timesteps",
    "sample_tokens",
    "single_step_sample",
]
