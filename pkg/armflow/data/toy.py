"""Synthetic actor/reactor pairs with analytically known responses.

Frames carry four channels: 2-D position then 2-D velocity. Actors are
sums of random sinusoids; the reactor follows one of three label rules:

- ``label % 3 == 0``: mirrored pursuit, ``reactor[t] = -actor[t - lag]``.
- ``label % 3 == 1``: orbit around the actor at ``radius``.
- ``label % 3 == 2``: evasion, holding ``distance`` behind the actor's heading.

Labels above 2 reuse the rule families with each rule parameter scaled by
``1 + label // 3``, so no two labels share a response.
"""

import hashlib
from dataclasses import dataclass
from typing import Iterator, Tuple

import numpy as np

from ..errors import ContractViolationError
from ..nn.vae import MotionSequence

CHANNELS = 4
N_SINUSOIDS = 3
SPLITS = ("train", "test")


@dataclass(frozen=True)
class ToyDataConfig:
    length: int = 64
    n_labels: int = 3
    fps: float = 20.0
    jitter: float = 0.01
    lag: int = 4
    radius: float = 1.0
    distance: float = 0.8

    def __post_init__(self):
        if self.n_labels < 2:
            raise ValueError(f"n_labels must be >= 2, got {self.n_labels}")
        if self.length < 1:
            raise ValueError(f"length must be >= 1, got {self.length}")
        if self.jitter < 0:
            raise ValueError(f"jitter must be >= 0, got {self.jitter}")


@dataclass
class ToyDataset:
    actor: np.ndarray
    reactor: np.ndarray
    labels: np.ndarray
    cfg: ToyDataConfig
    seed: int
    stream: int = 0
    split: str = "train"

    def __post_init__(self):
        if self.actor.shape != self.reactor.shape:
            raise ContractViolationError("actor and reactor frames must align")
        if np.any((self.labels < 0) | (self.labels >= self.cfg.n_labels)):
            raise ContractViolationError("labels out of range")

    def __len__(self) -> int:
        return self.labels.shape[0]

    def pair(self, index: int) -> Tuple[MotionSequence, MotionSequence, int]:
        return (
            MotionSequence(self.actor[index], "actor", self.cfg.fps),
            MotionSequence(self.reactor[index], "reactor", self.cfg.fps),
            int(self.labels[index]),
        )

    def __iter__(self) -> Iterator[Tuple[MotionSequence, MotionSequence, int]]:
        for i in range(len(self)):
            yield self.pair(i)

    def hash(self) -> str:
        digest = hashlib.sha256()
        digest.update(np.ascontiguousarray(self.labels, dtype="<i8").tobytes())
        for frames in (self.actor, self.reactor):
            digest.update(np.ascontiguousarray(frames, dtype="<f8").tobytes())
        return digest.hexdigest()


def _actor_frames(rng: np.random.Generator, n: int, cfg: ToyDataConfig) -> np.ndarray:
    tau = np.arange(cfg.length) / cfg.fps
    amplitude = rng.uniform(0.2, 0.6, size=(n, 2, N_SINUSOIDS))
    freq = rng.uniform(0.1, 0.8, size=(n, 2, N_SINUSOIDS))
    phase = rng.uniform(0.0, 2.0 * np.pi, size=(n, 2, N_SINUSOIDS))
    angle = 2.0 * np.pi * freq[..., None] * tau + phase[..., None]  # (n, 2, k, T)
    position = np.sum(amplitude[..., None] * np.sin(angle), axis=2)
    velocity = np.sum(amplitude[..., None] * 2.0 * np.pi * freq[..., None] * np.cos(angle), axis=2)
    return np.concatenate([position, velocity], axis=1).transpose(0, 2, 1)


def _mirrored(actor: np.ndarray, lag: int) -> np.ndarray:
    source = np.maximum(np.arange(actor.shape[0]) - lag, 0)
    return -actor[source]


def _orbit(actor: np.ndarray, label: int, cfg: ToyDataConfig) -> np.ndarray:
    tau = np.arange(actor.shape[0]) / cfg.fps
    omega = 2.0 * np.pi * 0.5 * (1 + label // 3)
    offset = cfg.radius * np.stack([np.cos(omega * tau), np.sin(omega * tau)], axis=-1)
    offset_vel = cfg.radius * omega * np.stack([-np.sin(omega * tau), np.cos(omega * tau)], axis=-1)
    return np.concatenate([actor[:, :2] + offset, actor[:, 2:] + offset_vel], axis=-1)


def _evasion(actor: np.ndarray, distance: float, cfg: ToyDataConfig) -> np.ndarray:
    heading = actor[:, 2:]
    norm = np.linalg.norm(heading, axis=-1, keepdims=True)
    unit = np.where(norm > 1e-9, heading / np.maximum(norm, 1e-9), np.array([1.0, 0.0]))
    position = actor[:, :2] - distance * unit
    if actor.shape[0] > 1:
        velocity = np.gradient(position, 1.0 / cfg.fps, axis=0)
    else:
        velocity = np.zeros_like(position)
    return np.concatenate([position, velocity], axis=-1)


def analytic_response(actor: np.ndarray, label: int, cfg: ToyDataConfig) -> np.ndarray:
    """Jitter-free reactor frames (T, 4) for one actor sequence."""
    actor = np.asarray(actor, dtype=np.float64)
    rule, cycle = label % 3, 1 + label // 3
    if rule == 0:
        return _mirrored(actor, cfg.lag * cycle)
    if rule == 1:
        return _orbit(actor, label, cfg)
    return _evasion(actor, cfg.distance * cycle, cfg)


def analytic_responses(actor: np.ndarray, labels: np.ndarray, cfg: ToyDataConfig) -> np.ndarray:
    return np.stack([analytic_response(a, int(c), cfg) for a, c in zip(actor, labels)])


def make_toy_dataset(
    n_pairs: int,
    cfg: ToyDataConfig,
    seed: int,
    stream: int = 0,
    split: str = "train",
) -> ToyDataset:
    """Fully reproducible from ``(seed, stream)``; labels are exactly balanced."""
    if n_pairs < 1:
        raise ContractViolationError(f"n_pairs must be >= 1, got {n_pairs}")
    if split not in SPLITS:
        raise ContractViolationError(f"unknown split '{split}'")
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(stream,)))
    labels = rng.permutation(np.arange(n_pairs) % cfg.n_labels).astype(np.int64)
    actor = _actor_frames(rng, n_pairs, cfg)
    reactor = analytic_responses(actor, labels, cfg)
    if cfg.jitter > 0:
        reactor = reactor + cfg.jitter * rng.standard_normal(reactor.shape)
    return ToyDataset(actor, reactor, labels, cfg, seed, stream, split)


def make_splits(
    n_train: int, n_test: int, cfg: ToyDataConfig, seed: int
) -> Tuple[ToyDataset, ToyDataset]:
    """Train and test sets from disjoint child streams of one seed."""
    return (
        make_toy_dataset(n_train, cfg, seed, stream=0, split="train"),
        make_toy_dataset(n_test, cfg, seed, stream=1, split="test"),
    )


def regenerate(dataset: ToyDataset) -> ToyDataset:
    return make_toy_dataset(len(dataset), dataset.cfg, dataset.seed, dataset.stream, dataset.split)
