"""Autoregressive state: the context buffer and per-layer key/value caches."""

from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from ..errors import CapacityError, ShapeMismatchError


class ContextBuffer:
    """Append-only history of (actor, reactor) token pairs.

    Entry 0 is the start-of-sequence slot; the sos embedding itself lives in
    the encoder's parameters, so ``len(buffer)`` is one more than the number
    of stored pairs. ``capacity`` bounds the number of pairs.
    """

    def __init__(self, batch: int, token_dim: int, capacity: int):
        self.capacity = capacity
        self._actor = np.zeros((batch, capacity, token_dim))
        self._reactor = np.zeros((batch, capacity, token_dim))
        self._n = 0

    @classmethod
    def from_tokens(cls, actor: np.ndarray, reactor: np.ndarray, capacity: int) -> "ContextBuffer":
        actor, reactor = np.asarray(actor, dtype=np.float64), np.asarray(reactor, dtype=np.float64)
        if actor.shape != reactor.shape:
            raise ShapeMismatchError(f"actor {actor.shape} and reactor {reactor.shape} differ")
        batch, n, token_dim = actor.shape
        if n > capacity:
            raise CapacityError(f"{n} history pairs exceed capacity {capacity}")
        buffer = cls(batch, token_dim, capacity)
        buffer._actor[:, :n] = actor
        buffer._reactor[:, :n] = reactor
        buffer._n = n
        return buffer

    def __len__(self) -> int:
        return self._n + 1

    @property
    def n_pairs(self) -> int:
        return self._n

    @property
    def batch(self) -> int:
        return self._actor.shape[0]

    @property
    def actor(self) -> np.ndarray:
        return self._actor[:, : self._n]

    @property
    def reactor(self) -> np.ndarray:
        return self._reactor[:, : self._n]

    def append(self, actor: np.ndarray, reactor: np.ndarray) -> None:
        if self._n >= self.capacity:
            raise CapacityError(f"context buffer is full ({self.capacity} pairs)")
        self._actor[:, self._n] = actor
        self._reactor[:, self._n] = reactor
        self._n += 1


class LayerCache:
    """Keys and values of one attention layer, preallocated to full length."""

    def __init__(self, capacity: int):
        self.capacity = capacity
        self.keys: Optional[np.ndarray] = None
        self.values: Optional[np.ndarray] = None
        self.length = 0
        self.reads = 0

    def append(self, keys: np.ndarray, values: np.ndarray) -> None:
        b, h, n, dh = keys.shape
        if self.keys is None:
            self.keys = np.zeros((b, h, self.capacity, dh))
            self.values = np.zeros((b, h, self.capacity, dh))
        if self.length + n > self.capacity:
            raise CapacityError(f"key/value cache is full ({self.capacity} positions)")
        self.keys[:, :, self.length : self.length + n] = keys
        self.values[:, :, self.length : self.length + n] = values
        self.length += n

    def view(self) -> Tuple[np.ndarray, np.ndarray]:
        self.reads += self.length
        return self.keys[:, :, : self.length], self.values[:, :, : self.length]


@dataclass
class KVCache:
    """Incremental encoder state for one rollout; never shared."""

    layers: List[LayerCache]
    cond_vec: np.ndarray
    null_history: np.ndarray
    length: int = 0

    @classmethod
    def create(
        cls, n_layers: int, capacity: int, cond_vec: np.ndarray, null_history: np.ndarray
    ) -> "KVCache":
        return cls([LayerCache(capacity) for _ in range(n_layers)], cond_vec, null_history)

    @property
    def attention_reads(self) -> int:
        return sum(layer.reads for layer in self.layers)
