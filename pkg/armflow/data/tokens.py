"""Frame <-> latent token conversion with a frozen VAE, and token batches."""

from dataclasses import dataclass
from typing import Iterator, List, Optional, Tuple

import numpy as np

from ..autodiff import no_grad
from ..errors import ShapeMismatchError
from ..nn.vae import LatentSequence, MotionSequence, MotionVAE


@dataclass
class TokenBatch:
    """Aligned actor / reactor latent tokens with their labels."""

    actor: np.ndarray
    reactor: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.actor = np.asarray(self.actor, dtype=np.float64)
        self.reactor = np.asarray(self.reactor, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.actor.shape != self.reactor.shape or self.actor.ndim != 3:
            raise ShapeMismatchError(
                f"actor {self.actor.shape} and reactor {self.reactor.shape} must be equal (B, N, L)"
            )
        if self.labels.shape != (self.actor.shape[0],):
            n = self.actor.shape[0]
            raise ShapeMismatchError(f"expected {n} labels, got {self.labels.shape}")

    @property
    def batch(self) -> int:
        return self.actor.shape[0]

    @property
    def n_tokens(self) -> int:
        return self.actor.shape[1]

    @property
    def token_dim(self) -> int:
        return self.actor.shape[2]

    def take(self, index: np.ndarray) -> "TokenBatch":
        return TokenBatch(self.actor[index], self.reactor[index], self.labels[index])


def _encode_means(vae: MotionVAE, frames: np.ndarray, role: str, chunk: int) -> np.ndarray:
    out = []
    with no_grad():
        for start in range(0, frames.shape[0], chunk):
            mean, _ = vae.encode_batch(frames[start : start + chunk], role)
            out.append(mean.data)
    return np.concatenate(out, axis=0)


def tokenize(
    vae: MotionVAE, actor: np.ndarray, reactor: np.ndarray, chunk: int = 256
) -> Tuple[np.ndarray, np.ndarray]:
    """Posterior-mean tokens for batched (B, T, D) actor and reactor frames."""
    actor, reactor = np.asarray(actor, dtype=np.float64), np.asarray(reactor, dtype=np.float64)
    if actor.shape != reactor.shape:
        raise ShapeMismatchError(f"actor {actor.shape} and reactor {reactor.shape} differ")
    return _encode_means(vae, actor, "actor", chunk), _encode_means(vae, reactor, "reactor", chunk)


def tokenize_pair(
    vae: MotionVAE, actor: MotionSequence, reactor: MotionSequence
) -> Tuple[LatentSequence, LatentSequence]:
    if len(actor) != len(reactor):
        raise ShapeMismatchError(f"actor has {len(actor)} frames, reactor {len(reactor)}")
    a, b = tokenize(vae, actor.frames[None], reactor.frames[None])
    return LatentSequence(a[0], "actor", len(actor)), LatentSequence(b[0], "reactor", len(reactor))


def detokenize(
    vae: MotionVAE, tokens: np.ndarray, role: str, length: Optional[int] = None, chunk: int = 256
) -> np.ndarray:
    """Decode (B, N, latent) tokens back to (B, length, channels) frames."""
    tokens = np.asarray(tokens, dtype=np.float64)
    out = []
    with no_grad():
        for start in range(0, tokens.shape[0], chunk):
            out.append(vae.decode_batch(tokens[start : start + chunk], role, length).data)
    return np.concatenate(out, axis=0)


class TokenizedDataset:
    """A toy dataset pushed through a frozen VAE once, kept in memory."""

    def __init__(self, actor: np.ndarray, reactor: np.ndarray, labels: np.ndarray, length: int):
        self.tokens = TokenBatch(actor, reactor, labels)
        self.length = length

    @classmethod
    def from_frames(
        cls, vae: MotionVAE, actor: np.ndarray, reactor: np.ndarray, labels: np.ndarray
    ) -> "TokenizedDataset":
        a, b = tokenize(vae, actor, reactor)
        return cls(a, b, labels, actor.shape[1])

    def __len__(self) -> int:
        return self.tokens.batch

    def sample_batch(self, rng: np.random.Generator, batch_size: int) -> TokenBatch:
        index = rng.choice(len(self), size=min(batch_size, len(self)), replace=False)
        return self.tokens.take(index)

    def batches(self, batch_size: int) -> Iterator[TokenBatch]:
        """Deterministic in-order batches, last one possibly short."""
        for start in range(0, len(self), batch_size):
            yield self.tokens.take(np.arange(start, min(start + batch_size, len(self))))

    def sequences(self, index: int) -> List[LatentSequence]:
        return [
            LatentSequence(self.tokens.actor[index], "actor", self.length),
            LatentSequence(self.tokens.reactor[index], "reactor", self.length),
        ]
