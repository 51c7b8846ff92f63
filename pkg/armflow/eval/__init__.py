"""Frozen feature embedder and the metric suite."""

from .embedder import EmbedderConfig, FeatureEmbedder, feature_embed, train_embedder
from .metrics import (
    MetricReport,
    diversity,
    diversity_and_mmodality,
    drift_auc,
    drift_curve,
    evaluate_generations,
    frechet_feature_distance,
    frechet_from_stats,
    mm_dist,
    multimodality,
    r_precision,
    wasserstein1_marginal,
    wasserstein1_marginals,
)

__all__ = [
    "EmbedderConfig",
    "FeatureEmbedder",
    "MetricReport",
    "diversity",
    "diversity_and_mmodality",
    "drift_auc",
    "drift_curve",
    "evaluate_generations",
    "feature_embed",
    "frechet_feature_distance",
    "frechet_from_stats",
    "mm_dist",
    "multimodality",
    "r_precision",
    "train_embedder",
    "wasserstein1_marginal",
    "wasserstein1_marginals",
]
