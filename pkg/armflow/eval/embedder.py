"""Frozen interaction embedder used as the feature extractor for every metric.

A small causal-conv encoder maps an (actor, reactor) frame pair to a feature
vector; one learned prototype per label doubles as that label's condition
embedding. Training is a prototype classifier with cross-entropy on negative
squared distances.
"""

import logging
from dataclasses import dataclass
from typing import Callable, Optional, Tuple

import numpy as np

from ..autodiff import backward, no_grad, ops
from ..core.store import CheckpointMixin, ParameterStore
from ..data.toy import ToyDataset
from ..errors import EmbedderGateError, ShapeMismatchError
from ..nn.layers import ParamInit, causal_conv1d, linear
from ..nn.vae import MotionSequence
from ..train.optim import AdamState, TrainConfig, adamw_step

logger = logging.getLogger(__name__)

CONV_KERNEL = 3
N_CONV = 2
CONV_STRIDE = 2


@dataclass(frozen=True)
class EmbedderConfig:
    channels: int = 4
    hidden: int = 32
    features: int = 16
    n_labels: int = 3


class FeatureEmbedder(CheckpointMixin):
    KIND = "embedder"
    CONFIG = EmbedderConfig

    def __init__(self, cfg: EmbedderConfig, params: ParameterStore):
        self.cfg = cfg
        self.params = params

    @classmethod
    def init(cls, cfg: EmbedderConfig, seed: int) -> "FeatureEmbedder":
        store = ParameterStore()
        init = ParamInit(store, np.random.default_rng(seed))
        init.linear("embedder.in", 2 * cfg.channels, cfg.hidden)
        for j in range(N_CONV):
            init.linear(f"embedder.conv{j}", CONV_KERNEL * cfg.hidden, cfg.hidden)
        init.linear("embedder.out", cfg.hidden, cfg.features)
        init.normal("embedder.prototypes", (cfg.n_labels, cfg.features), 1.0)
        return cls(cfg, store)

    @property
    def checksum(self) -> str:
        return self.params.fingerprint()

    def _features(self, actor: np.ndarray, reactor: np.ndarray):
        actor, reactor = np.asarray(actor, dtype=np.float64), np.asarray(reactor, dtype=np.float64)
        if actor.shape != reactor.shape or actor.shape[-1] != self.cfg.channels:
            raise ShapeMismatchError(
                f"expected equal (B, T, {self.cfg.channels}) frames, "
                f"got {actor.shape} and {reactor.shape}"
            )
        window = CONV_STRIDE**N_CONV
        if actor.shape[1] % window:
            raise ShapeMismatchError(
                f"frame count {actor.shape[1]} is not a multiple of {window}"
            )
        p = self.params
        h = ops.gelu(linear(p, "embedder.in", np.concatenate([actor, reactor], axis=-1)))
        for j in range(N_CONV):
            h = ops.gelu(causal_conv1d(p, f"embedder.conv{j}", h, CONV_KERNEL, CONV_STRIDE))
        return linear(p, "embedder.out", ops.mean(h, axis=1))

    def _logits(self, features):
        prototypes = self.params["embedder.prototypes"]
        f_sq = ops.sum(ops.square(features), axis=-1, keepdims=True)
        p_sq = ops.sum(ops.square(prototypes), axis=-1)
        cross = ops.matmul(features, ops.transpose(prototypes, (1, 0)))
        return ops.mul(ops.add(ops.add(f_sq, p_sq), ops.mul(cross, -2.0)), -1.0)

    def loss(self, actor: np.ndarray, reactor: np.ndarray, labels: np.ndarray):
        log_probs = ops.log_softmax(self._logits(self._features(actor, reactor)))
        onehot = np.eye(self.cfg.n_labels)[np.asarray(labels, dtype=np.int64)]
        log_likelihood = ops.sum(ops.mul(log_probs, onehot), axis=-1)
        return ops.mul(ops.mean(log_likelihood), -1.0)

    def embed(self, actor: np.ndarray, reactor: np.ndarray) -> np.ndarray:
        """(B, features) for batched (B, T, channels) frame pairs."""
        with no_grad():
            return self._features(actor, reactor).data.copy()

    def predict(self, actor: np.ndarray, reactor: np.ndarray) -> np.ndarray:
        with no_grad():
            return np.argmax(self._logits(self._features(actor, reactor)).data, axis=-1)

    def condition_features(self, labels: np.ndarray) -> np.ndarray:
        return self.params["embedder.prototypes"].data[np.asarray(labels, dtype=np.int64)]

    def accuracy(self, dataset: ToyDataset) -> float:
        return float(np.mean(self.predict(dataset.actor, dataset.reactor) == dataset.labels))


def feature_embed(
    embedder: FeatureEmbedder, actor: MotionSequence, reactor: MotionSequence
) -> np.ndarray:
    return embedder.embed(actor.frames[None], reactor.frames[None])[0]


def train_embedder(
    cfg: EmbedderConfig,
    train: ToyDataset,
    held_out: ToyDataset,
    iterations: int = 300,
    lr: float = 3e-3,
    batch_size: int = 64,
    seed: int = 0,
    gate: float = 0.9,
    enforce_gate: bool = True,
    progress: Optional[Callable[[int, float], None]] = None,
) -> Tuple[FeatureEmbedder, float]:
    """Fit the label classifier, freeze it and check held-out top-1 accuracy."""
    embedder = FeatureEmbedder.init(cfg, seed)
    optim = TrainConfig(lr=lr, batch_size=batch_size, max_iterations=iterations, seed=seed)
    state = AdamState()
    rng = np.random.default_rng(seed)
    for iteration in range(iterations):
        index = rng.choice(len(train), size=min(batch_size, len(train)), replace=False)
        loss = embedder.loss(train.actor[index], train.reactor[index], train.labels[index])
        adamw_step(embedder.params, backward(loss, embedder.params), state, optim)
        if progress is not None:
            progress(iteration + 1, loss.item())

    frozen = FeatureEmbedder(cfg, embedder.params.frozen())
    accuracy = frozen.accuracy(held_out)
    logger.info("embedder held-out accuracy %.3f (gate %.2f)", accuracy, gate)
    if accuracy < gate:
        message = f"embedder accuracy {accuracy:.3f} is below the gate {gate:.2f}"
        if enforce_gate:
            raise EmbedderGateError(message)
        logger.warning("%s; metrics will be unreliable", message)
    return frozen, accuracy
