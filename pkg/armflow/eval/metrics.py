"""Feature-space metrics, drift instrumentation and distribution distances."""

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
from scipy.integrate import trapezoid
from scipy.linalg import eigh
from scipy.stats import wasserstein_distance

from ..core.store import atomic_write
from ..errors import ContractViolationError, NumericError, ShapeMismatchError
from .embedder import FeatureEmbedder

logger = logging.getLogger(__name__)

CLAMP_TOLERANCE = 1e-8


def _psd_sqrt(matrix: np.ndarray, what: str) -> Tuple[np.ndarray, int]:
    """Symmetric square root with negative eigenvalues clamped to zero."""
    values, vectors = eigh((matrix + matrix.T) / 2.0)
    scale = max(1.0, float(np.max(np.abs(values))))
    clamped = int(np.sum(values < -CLAMP_TOLERANCE * scale))
    if clamped:
        logger.warning("%s: clamped %d negative eigenvalue(s) to zero", what, clamped)
    root = vectors @ np.diag(np.sqrt(np.clip(values, 0.0, None))) @ vectors.T
    return root, clamped


def frechet_from_stats(
    mu_a: np.ndarray, sigma_a: np.ndarray, mu_b: np.ndarray, sigma_b: np.ndarray
) -> float:
    """``|mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a S_b)^(1/2))``.

    The cross term uses ``tr((A^1/2 B A^1/2)^1/2)``, which equals
    ``tr((A B)^1/2)`` and only needs symmetric eigendecompositions.
    """
    mu_a, mu_b = np.atleast_1d(mu_a), np.atleast_1d(mu_b)
    sigma_a, sigma_b = np.atleast_2d(sigma_a), np.atleast_2d(sigma_b)
    if mu_a.shape != mu_b.shape or sigma_a.shape != sigma_b.shape:
        raise ShapeMismatchError("feature statistics have different dimensions")
    root_a, _ = _psd_sqrt(sigma_a, "covariance")
    inner, _ = _psd_sqrt(root_a @ sigma_b @ root_a, "covariance product")
    diff = mu_a - mu_b
    value = float(diff @ diff + np.trace(sigma_a) + np.trace(sigma_b) - 2.0 * np.trace(inner))
    return max(value, 0.0)


def feature_stats(features: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    features = np.asarray(features, dtype=np.float64)
    if features.ndim == 1:
        features = features[:, None]
    if features.shape[0] < 2:
        raise ContractViolationError("need at least 2 samples for feature statistics")
    return features.mean(axis=0), np.atleast_2d(np.cov(features, rowvar=False))


def frechet_feature_distance(features_a: np.ndarray, features_b: np.ndarray) -> float:
    mu_a, sigma_a = feature_stats(features_a)
    mu_b, sigma_b = feature_stats(features_b)
    return frechet_from_stats(mu_a, sigma_a, mu_b, sigma_b)


def r_precision(
    features: np.ndarray,
    condition_features: np.ndarray,
    pool_size: int = 32,
    top_k: int = 3,
    rng: Optional[np.random.Generator] = None,
) -> np.ndarray:
    """Top-1..top-k hit rates of each sample's own condition in a random pool.

    Every query is ranked against its true condition plus ``pool_size - 1``
    distinct other conditions. Samples sharing a condition embedding count as
    one prototype, so the pool never holds a copy of the true condition.
    Only strictly closer distractors push the true condition down.
    """
    features = np.asarray(features, dtype=np.float64)
    condition_features = np.asarray(condition_features, dtype=np.float64)
    if features.shape != condition_features.shape:
        raise ShapeMismatchError(
            f"features {features.shape} and condition features {condition_features.shape} differ"
        )
    if pool_size < top_k:
        raise ContractViolationError(f"pool of {pool_size} is smaller than top_k {top_k}")
    prototypes, owner = np.unique(condition_features, axis=0, return_inverse=True)
    owner = owner.reshape(-1)
    n_prototypes = prototypes.shape[0]
    if n_prototypes < pool_size:
        raise ContractViolationError(
            f"need at least {pool_size} distinct conditions, got {n_prototypes}"
        )
    rng = rng if rng is not None else np.random.default_rng(0)

    n = features.shape[0]
    hits = np.zeros(top_k)
    for i in range(n):
        others = rng.choice(n_prototypes - 1, size=pool_size - 1, replace=False)
        others = others + (others >= owner[i])
        true_dist = np.linalg.norm(features[i] - prototypes[owner[i]])
        dists = np.linalg.norm(features[i] - prototypes[others], axis=-1)
        rank = int(np.sum(dists < true_dist))
        hits += rank < np.arange(1, top_k + 1)
    return hits / n


def distinct_conditions(condition_features: np.ndarray) -> int:
    return int(np.unique(np.asarray(condition_features), axis=0).shape[0])


def mm_dist(features: np.ndarray, condition_features: np.ndarray) -> float:
    """Mean distance between each sample and its own condition embedding."""
    features = np.asarray(features, dtype=np.float64)
    if features.shape != np.shape(condition_features):
        raise ShapeMismatchError("features and condition features differ in shape")
    return float(np.mean(np.linalg.norm(features - condition_features, axis=-1)))


def _mean_pair_distance(features: np.ndarray, n_pairs: int, rng: np.random.Generator) -> float:
    n = features.shape[0]
    first = rng.integers(0, n, size=n_pairs)
    second = (first + rng.integers(1, n, size=n_pairs)) % n
    return float(np.mean(np.linalg.norm(features[first] - features[second], axis=-1)))


def diversity(
    features: np.ndarray, n_pairs: int = 300, rng: Optional[np.random.Generator] = None
) -> float:
    """Mean distance of random distinct pairs across the whole set."""
    features = np.asarray(features, dtype=np.float64)
    if features.shape[0] < 2:
        raise ContractViolationError("diversity needs at least 2 samples")
    rng = rng if rng is not None else np.random.default_rng(0)
    return _mean_pair_distance(features, n_pairs, rng)


def multimodality(
    features: np.ndarray,
    conditions: np.ndarray,
    n_pairs: int = 300,
    rng: Optional[np.random.Generator] = None,
) -> float:
    """Mean pairwise distance among repeated generations of the same condition.

    ``conditions`` holds one condition id per row; rows sharing an id are
    repeats of one (actor, label) request.
    """
    features = np.asarray(features, dtype=np.float64)
    conditions = np.asarray(conditions)
    if conditions.shape != features.shape[:1]:
        raise ShapeMismatchError(f"{features.shape[0]} features but {conditions.shape} ids")
    rng = rng if rng is not None else np.random.default_rng(0)
    spreads = []
    for condition in np.unique(conditions):
        group = features[conditions == condition]
        if group.shape[0] < 2:
            raise ContractViolationError(
                f"multimodality needs 2 generations of condition {condition}"
            )
        spreads.append(_mean_pair_distance(group, n_pairs, rng))
    return float(np.mean(spreads))


def diversity_and_mmodality(
    features: np.ndarray,
    conditions: np.ndarray,
    n_pairs: int = 300,
    rng: Optional[np.random.Generator] = None,
) -> Tuple[float, float]:
    rng = rng if rng is not None else np.random.default_rng(0)
    return diversity(features, n_pairs, rng), multimodality(features, conditions, n_pairs, rng)


def drift_curve(
    generated: np.ndarray,
    reference: np.ndarray,
    n_buckets: int = 4,
    frames_per_token: int = 4,
) -> np.ndarray:
    """Per-horizon squared error, bucketed by the token index of each frame.

    Each bucket averages the per-frame squared L2 error over samples and
    frames, so a constant offset ``d`` in every channel gives ``d^2 * D``.
    """
    generated = np.asarray(generated, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    if generated.shape != reference.shape:
        raise ShapeMismatchError(f"generation {generated.shape} vs reference {reference.shape}")
    error = np.sum(np.square(generated - reference), axis=-1)  # (B, T)
    token_index = np.arange(generated.shape[1]) // frames_per_token
    groups = np.array_split(np.arange(token_index.max() + 1), n_buckets)
    curve = []
    for group in groups:
        if group.size == 0:
            continue
        frames = np.isin(token_index, group)
        curve.append(float(np.mean(error[:, frames])))
    return np.asarray(curve)


def drift_auc(curve: np.ndarray) -> float:
    curve = np.asarray(curve, dtype=np.float64)
    if curve.size == 1:
        return float(curve[0])
    return float(trapezoid(curve, np.linspace(0.0, 1.0, curve.size)))


def wasserstein1_marginal(samples_a: np.ndarray, samples_b: np.ndarray) -> float:
    """W1 between two 1-D empirical distributions."""
    a = np.asarray(samples_a, dtype=np.float64).ravel()
    b = np.asarray(samples_b, dtype=np.float64).ravel()
    if a.size == 0 or b.size == 0:
        raise ContractViolationError("W1 needs non-empty sample sets")
    return float(wasserstein_distance(a, b))


def wasserstein1_marginals(samples_a: np.ndarray, samples_b: np.ndarray) -> np.ndarray:
    a, b = np.atleast_2d(samples_a.T).T, np.atleast_2d(samples_b.T).T
    return np.asarray([wasserstein1_marginal(a[:, j], b[:, j]) for j in range(a.shape[1])])


@dataclass
class MetricReport:
    ffd: float
    diversity: float
    r_precision: List[float]
    mm_dist: float
    drift: List[float]
    drift_auc: float
    mmodality: Optional[float] = None
    meta: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        values = [self.ffd, self.diversity, self.mm_dist, self.drift_auc]
        if self.mmodality is not None:
            values.append(self.mmodality)
        values += list(self.r_precision) + list(self.drift)
        if not np.all(np.isfinite(values)):
            raise NumericError("metric report contains non-finite values")
        if any(not 0.0 <= r <= 1.0 for r in self.r_precision) or np.any(
            np.diff(self.r_precision) < 0
        ):
            raise ContractViolationError(f"malformed r_precision {self.r_precision}")

    def to_row(self) -> Dict[str, float]:
        row = {
            "ffd": self.ffd,
            "diversity": self.diversity,
            "mm_dist": self.mm_dist,
            "drift_auc": self.drift_auc,
        }
        if self.mmodality is not None:
            row["mmodality"] = self.mmodality
        row.update({f"top{k + 1}": r for k, r in enumerate(self.r_precision)})
        return row

    def write_json(self, path: Path) -> None:
        def writer(tmp: Path) -> None:
            with open(tmp, "w") as f:
                json.dump(asdict(self), f, indent=2)

        atomic_write(Path(path), writer)


def evaluate_generations(
    embedder: FeatureEmbedder,
    actor: np.ndarray,
    generated: np.ndarray,
    ground_truth: np.ndarray,
    labels: np.ndarray,
    reference: np.ndarray,
    pool_size: int = 32,
    top_k: int = 3,
    diversity_pairs: int = 300,
    drift_buckets: int = 4,
    frames_per_token: int = 4,
    seed: int = 0,
    meta: Optional[Dict[str, Any]] = None,
    repeats: Optional[np.ndarray] = None,
) -> MetricReport:
    """Score generated reactor frames against ground truth and the analytic reference.

    ``repeats`` holds further generations for the same requests, shaped
    (R, B, T, C); multimodality is reported only when it is given.
    """
    rng = np.random.default_rng(seed)
    gen_features = embedder.embed(actor, generated)
    gt_features = embedder.embed(actor, ground_truth)
    cond_features = embedder.condition_features(labels)

    spread = diversity(gen_features, diversity_pairs, rng)
    mmodality = None
    if repeats is not None:
        repeats = np.asarray(repeats, dtype=np.float64)
        if repeats.shape[1:] != generated.shape:
            raise ShapeMismatchError(f"repeats {repeats.shape} vs generated {generated.shape}")
        stacked = np.concatenate([generated[None], repeats], axis=0)
        features = np.concatenate([embedder.embed(actor, frames) for frames in stacked])
        conditions = np.tile(np.arange(generated.shape[0]), stacked.shape[0])
        mmodality = multimodality(features, conditions, diversity_pairs, rng)
    curve = drift_curve(generated, reference, drift_buckets, frames_per_token)
    pool = min(pool_size, distinct_conditions(cond_features))
    top = min(top_k, pool)
    meta = dict(meta or {})
    meta.setdefault("embedder_checksum", embedder.checksum)
    meta["pool_size"] = pool
    return MetricReport(
        ffd=frechet_feature_distance(gen_features, gt_features),
        diversity=spread,
        r_precision=r_precision(gen_features, cond_features, pool, top, rng).tolist(),
        mm_dist=mm_dist(gen_features, cond_features),
        mmodality=mmodality,
        drift=curve.tolist(),
        drift_auc=drift_auc(curve),
        meta=meta,
    )
