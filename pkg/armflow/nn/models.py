"""Velocity networks: offline ReMFlow, the online context encoder and predictor,
and a small field for toy distributions.

All models follow the velocity-field calling convention
``model(z, r, t, cond)`` used by :mod:`armflow.flow.field`.
"""

from collections import Counter
from dataclasses import dataclass, replace
from typing import Any, Optional, Tuple

import numpy as np

from ..autodiff import as_array, no_grad, ops
from ..core.store import CheckpointMixin, ParameterStore
from ..errors import (
    CapacityError,
    ContractViolationError,
    InvariantViolationError,
    ShapeMismatchError,
)
from .cache import ContextBuffer, KVCache
from .layers import (
    ParamInit,
    adaln_final,
    adaln_modulate,
    cached_attention,
    linear,
    mask_mix,
    mlp,
    positional_encoding,
    self_attention,
    timestep_embedding,
)

NULL_LABEL = -1

# Predictor roles: which stream a token belongs to.
REACTOR = 0
ACTOR = 1


@dataclass(frozen=True)
class ModelConfig:
    token_dim: int = 8
    hidden: int = 128
    n_layers: int = 4
    n_heads: int = 4
    mlp_layers: int = 3
    use_skip: bool = True
    use_pos_enc: bool = True
    n_labels: int = 3
    max_tokens: int = 64
    freq_dim: int = 32

    def __post_init__(self):
        if self.hidden % self.n_heads:
            raise ValueError(
                f"hidden ({self.hidden}) must be divisible by n_heads ({self.n_heads})"
            )
        if self.n_labels < 1:
            raise ValueError("n_labels must be >= 1")


def _flags(value: Any, batch: int) -> np.ndarray:
    if value is None:
        return np.zeros(batch, dtype=bool)
    return np.broadcast_to(np.asarray(value, dtype=bool), (batch,)).copy()


@dataclass
class Condition:
    """Label condition plus the null flags used by guidance.

    ``actor`` carries the full actor token sequence for the offline model.
    """

    labels: np.ndarray
    actor: Optional[np.ndarray] = None
    null_history: Optional[np.ndarray] = None
    null_actor: Optional[np.ndarray] = None

    def __post_init__(self):
        self.labels = np.atleast_1d(np.asarray(self.labels, dtype=np.int64))
        batch = self.labels.shape[0]
        self.null_history = _flags(self.null_history, batch)
        self.null_actor = _flags(self.null_actor, batch)
        if self.actor is not None:
            self.actor = np.asarray(self.actor, dtype=np.float64)

    @classmethod
    def null(cls, batch: int, actor: Optional[np.ndarray] = None) -> "Condition":
        return cls(np.full(batch, NULL_LABEL), actor, True, True)

    @property
    def batch(self) -> int:
        return self.labels.shape[0]

    @property
    def is_null(self) -> np.ndarray:
        return self.labels == NULL_LABEL

    def drop(self, mask: np.ndarray) -> "Condition":
        """Replace label, history and actor with null tokens where ``mask``."""
        mask = np.asarray(mask, dtype=bool)
        return Condition(
            np.where(mask, NULL_LABEL, self.labels),
            self.actor,
            self.null_history | mask,
            self.null_actor | mask,
        )

    def take(self, index: np.ndarray) -> "Condition":
        actor = None if self.actor is None else self.actor[index]
        return Condition(
            self.labels[index], actor, self.null_history[index], self.null_actor[index]
        )


def _label_ids(labels: np.ndarray, n_labels: int) -> np.ndarray:
    if np.any((labels != NULL_LABEL) & ((labels < 0) | (labels >= n_labels))):
        raise ContractViolationError(f"labels must lie in [0, {n_labels}) or be NULL")
    return np.where(labels == NULL_LABEL, n_labels, labels)


def _broadcast_row(row, batch: int, dim: int):
    """A learned (dim,) vector repeated to (batch, 1, dim)."""
    return ops.add(ops.reshape(row, (1, 1, dim)), np.zeros((batch, 1, dim)))


class TransformerBlocks:
    """DiT-style stack: adaLN-modulated attention and MLP per layer."""

    def __init__(self, name: str, cfg: ModelConfig):
        self.name = name
        self.cfg = cfg

    def init(self, init: ParamInit) -> None:
        h = self.cfg.hidden
        for j in range(self.cfg.n_layers):
            block = f"{self.name}.{j}"
            init.adaln(f"{block}.attn_mod", h, h)
            init.attention(f"{block}.attn", h)
            init.adaln(f"{block}.mlp_mod", h, h)
            init.mlp(f"{block}.mlp", h, 2 * h)

    def block(self, p: ParameterStore, j: int, h, cond, attend):
        block = f"{self.name}.{j}"
        h = adaln_modulate(p, f"{block}.attn_mod", h, cond, lambda x: attend(f"{block}.attn", x))
        return adaln_modulate(p, f"{block}.mlp_mod", h, cond, lambda x: mlp(p, f"{block}.mlp", x))


class VelocityMLP:
    """Residual adaLN MLP ending in a zero-initialised projection."""

    def __init__(self, name: str, hidden: int, n_layers: int, out_dim: int):
        self.name = name
        self.hidden = hidden
        self.n_layers = n_layers
        self.out_dim = out_dim

    def init(self, init: ParamInit) -> None:
        for j in range(self.n_layers):
            init.adaln(f"{self.name}.blocks.{j}.mod", self.hidden, self.hidden)
            init.mlp(f"{self.name}.blocks.{j}.mlp", self.hidden, 2 * self.hidden)
        init.adaln_final(f"{self.name}.final", self.hidden, self.hidden, self.out_dim)

    def __call__(self, p: ParameterStore, h, cond):
        for j in range(self.n_layers):
            block = f"{self.name}.blocks.{j}"
            h = adaln_modulate(p, f"{block}.mod", h, cond, lambda x, b=block: mlp(p, f"{b}.mlp", x))
        return adaln_final(p, f"{self.name}.final", h, cond)


class ReMFlow(CheckpointMixin):
    """Offline generator: full attention over concatenated actor/reactor tokens."""

    KIND = "remflow"
    CONFIG = ModelConfig

    def __init__(self, cfg: ModelConfig, params: ParameterStore):
        self.cfg = cfg
        self.params = params
        self.blocks = TransformerBlocks("remflow.blocks", cfg)
        self.calls: Counter = Counter()
        self._pe = positional_encoding(cfg.max_tokens, cfg.hidden)

    @classmethod
    def init(cls, cfg: ModelConfig, seed: int) -> "ReMFlow":
        store = ParameterStore()
        init = ParamInit(store, np.random.default_rng(seed))
        h, d = cfg.hidden, cfg.token_dim
        init.linear("remflow.in", 2 * d, h)
        init.normal("remflow.null_actor", (d,), 1.0)
        init.normal("remflow.label", (cfg.n_labels + 1, h), 1.0)
        init.timestep("remflow.temb_r", cfg.freq_dim, h)
        init.timestep("remflow.temb_t", cfg.freq_dim, h)
        model = cls(cfg, store)
        model.blocks.init(init)
        for j in model._skip_consumers():
            init.linear(f"remflow.skips.{j}", 2 * h, h)
        init.adaln_final("remflow.final", h, h, d)
        return model

    def _skip_consumers(self):
        n = self.cfg.n_layers
        return range(n - n // 2, n) if self.cfg.use_skip else range(0)

    def forward(self, actor: np.ndarray, z, r, t, cond: Condition):
        """Average velocity per reactor token, shape (B, N, token_dim)."""
        p, cfg = self.params, self.cfg
        actor = np.asarray(actor, dtype=np.float64)
        if actor.shape != np.shape(as_array(z)):
            raise ShapeMismatchError(
                f"actor tokens {actor.shape} and reactor tokens {np.shape(as_array(z))} differ"
            )
        _, n_tokens, _ = actor.shape
        if n_tokens > cfg.max_tokens:
            raise CapacityError(f"{n_tokens} tokens exceed max_tokens {cfg.max_tokens}")
        self.calls["forward"] += 1

        actor_in = mask_mix(actor, p["remflow.null_actor"], cond.null_actor)
        h = linear(p, "remflow.in", ops.concat([actor_in, z], axis=-1))
        if cfg.use_pos_enc:
            h = ops.add(h, self._pe[:n_tokens])
        c = ops.add(
            ops.embedding(p["remflow.label"], _label_ids(cond.labels, cfg.n_labels)),
            ops.add(
                timestep_embedding(p, "remflow.temb_r", r, cfg.freq_dim),
                timestep_embedding(p, "remflow.temb_t", t, cfg.freq_dim),
            ),
        )

        def attend(name, x):
            return self_attention(p, name, x, cfg.n_heads)

        consumers = set(self._skip_consumers())
        skips = []
        for j in range(cfg.n_layers):
            if j in consumers:
                h = linear(p, f"remflow.skips.{j}", ops.concat([h, skips.pop()], axis=-1))
            h = self.blocks.block(p, j, h, c, attend)
            if cfg.use_skip and j < cfg.n_layers // 2:
                skips.append(h)
        return adaln_final(p, "remflow.final", h, c)

    def __call__(self, z, r, t, cond: Condition):
        if cond.actor is None:
            raise ContractViolationError("offline condition must carry actor tokens")
        return self.forward(cond.actor, z, r, t, cond)

    def null_condition(self, cond: Condition) -> Condition:
        return Condition.null(cond.batch, cond.actor)

    def dropped(self, cond: Condition) -> np.ndarray:
        return cond.is_null


class ContextEncoder:
    """Causal transformer over ``<sos>`` followed by (actor, reactor) pairs."""

    def __init__(self, cfg: ModelConfig, params: ParameterStore, calls: Counter):
        self.cfg = cfg
        self.params = params
        self.calls = calls
        self.blocks = TransformerBlocks("encoder.blocks", cfg)
        self._pe = positional_encoding(cfg.max_tokens + 1, cfg.hidden)

    def init(self, init: ParamInit) -> None:
        h, d = self.cfg.hidden, self.cfg.token_dim
        init.linear("encoder.pair", 2 * d, h)
        init.normal("encoder.sos", (h,), 1.0)
        init.normal("encoder.null_entry", (h,), 1.0)
        init.normal("encoder.label", (self.cfg.n_labels + 1, h), 1.0)
        self.blocks.init(init)

    def _cond_vec(self, cond: Condition):
        ids = _label_ids(cond.labels, self.cfg.n_labels)
        return ops.embedding(self.params["encoder.label"], ids)

    def _pair_embedding(self, actor, reactor, null_history: np.ndarray):
        pairs = linear(self.params, "encoder.pair", ops.concat([actor, reactor], axis=-1))
        return mask_mix(pairs, self.params["encoder.null_entry"], null_history)

    def encode(self, buffer: ContextBuffer, cond: Condition):
        """Context vectors for every buffer position, shape (B, len(buffer), H)."""
        p, cfg = self.params, self.cfg
        if buffer.n_pairs > cfg.max_tokens:
            raise CapacityError(
                f"{buffer.n_pairs} history pairs exceed max_tokens {cfg.max_tokens}"
            )
        self.calls["encoder"] += 1
        h = _broadcast_row(p["encoder.sos"], buffer.batch, cfg.hidden)
        if buffer.n_pairs:
            pairs = self._pair_embedding(buffer.actor, buffer.reactor, cond.null_history)
            h = ops.concat([h, pairs], axis=1)
        h = ops.add(h, self._pe[: len(buffer)])
        c = self._cond_vec(cond)

        def attend(name, x):
            return self_attention(p, name, x, cfg.n_heads, causal=True)

        for j in range(cfg.n_layers):
            h = self.blocks.block(p, j, h, c, attend)
        return ops.layer_norm(h)

    def _step(self, cache: KVCache, x) -> np.ndarray:
        p = self.params

        h = x
        for j, layer in enumerate(cache.layers):

            def attend(name, x_new, layer=layer):
                return cached_attention(p, name, x_new, layer, self.cfg.n_heads)

            h = self.blocks.block(p, j, h, cache.cond_vec, attend)
        cache.length += 1
        return as_array(ops.layer_norm(h))[:, 0]

    def start(self, cond: Condition) -> Tuple[KVCache, np.ndarray]:
        """Open a rollout: encode ``<sos>`` and return (cache, c_0)."""
        cfg = self.cfg
        self.calls["encoder"] += 1
        with no_grad():
            cond_vec = as_array(self._cond_vec(cond))
            cache = KVCache.create(cfg.n_layers, cfg.max_tokens + 1, cond_vec, cond.null_history)
            sos = _broadcast_row(self.params["encoder.sos"], cond.batch, cfg.hidden)
            x = ops.add(sos, self._pe[0])
            return cache, self._step(cache, x)

    def update(
        self, buffer: ContextBuffer, actor: np.ndarray, reactor: np.ndarray, cache: KVCache
    ) -> np.ndarray:
        """Append one pair to ``buffer`` and return its context from the cache."""
        if cache.length != len(buffer):
            raise InvariantViolationError(
                f"cache covers {cache.length} positions but buffer holds {len(buffer)}"
            )
        buffer.append(actor, reactor)
        self.calls["encoder"] += 1
        position = cache.length
        with no_grad():
            entry = self._pair_embedding(actor, reactor, cache.null_history)
            entry = ops.reshape(entry, (entry.shape[0], 1, self.cfg.hidden))
            return self._step(cache, ops.add(entry, self._pe[position]))


@dataclass
class PredictorCondition:
    """Everything the per-token predictor conditions on besides (z, r, t)."""

    context: Any
    actor: np.ndarray
    role: np.ndarray
    null_partner: np.ndarray
    dropped: np.ndarray
    null_context: Optional[np.ndarray] = None

    @classmethod
    def build(
        cls,
        context: Any,
        actor: np.ndarray,
        role: int = REACTOR,
        dropped: Optional[np.ndarray] = None,
        null_context: Optional[np.ndarray] = None,
    ) -> "PredictorCondition":
        actor = np.asarray(actor, dtype=np.float64)
        batch = actor.shape[0]
        dropped = _flags(dropped, batch)
        roles = np.full(batch, role, dtype=np.int64)
        return cls(context, actor, roles, dropped | (roles == ACTOR), dropped, null_context)


class VelocityPredictor:
    """Per-token MLP conditioned on the previous context, (r, t) and role."""

    def __init__(self, cfg: ModelConfig, params: ParameterStore, calls: Counter):
        self.cfg = cfg
        self.params = params
        self.calls = calls
        self.mlp = VelocityMLP("predictor", cfg.hidden, cfg.mlp_layers, cfg.token_dim)

    def init(self, init: ParamInit) -> None:
        h, d = self.cfg.hidden, self.cfg.token_dim
        init.linear("predictor.in", 2 * d, h)
        init.normal("predictor.null_partner", (d,), 1.0)
        init.normal("predictor.role", (2, h), 1.0)
        init.timestep("predictor.temb_r", self.cfg.freq_dim, h)
        init.timestep("predictor.temb_t", self.cfg.freq_dim, h)
        self.mlp.init(init)

    def __call__(self, z, r, t, cond: PredictorCondition):
        p, cfg = self.params, self.cfg
        if np.shape(as_array(z)) != cond.actor.shape:
            raise ShapeMismatchError(
                f"noisy token {np.shape(as_array(z))} and actor token {cond.actor.shape} differ"
            )
        self.calls["predictor"] += 1
        partner = mask_mix(cond.actor, p["predictor.null_partner"], cond.null_partner)
        h = linear(p, "predictor.in", ops.concat([z, partner], axis=-1))
        c = ops.add(
            ops.add(cond.context, ops.embedding(p["predictor.role"], cond.role)),
            ops.add(
                timestep_embedding(p, "predictor.temb_r", r, cfg.freq_dim),
                timestep_embedding(p, "predictor.temb_t", t, cfg.freq_dim),
            ),
        )
        return self.mlp(p, h, c)

    def null_condition(self, cond: PredictorCondition) -> PredictorCondition:
        if cond.null_context is None:
            raise ContractViolationError("guidance needs the null-history context")
        batch = cond.actor.shape[0]
        return replace(
            cond,
            context=cond.null_context,
            null_partner=np.ones(batch, dtype=bool),
            dropped=np.ones(batch, dtype=bool),
        )

    def dropped(self, cond: PredictorCondition) -> np.ndarray:
        return cond.dropped


class ARMFlow(CheckpointMixin):
    """Online generator: causal context encoder plus per-token velocity predictor."""

    KIND = "armflow"
    CONFIG = ModelConfig

    def __init__(self, cfg: ModelConfig, params: ParameterStore):
        self.cfg = cfg
        self.params = params
        self.calls: Counter = Counter()
        self.encoder = ContextEncoder(cfg, params, self.calls)
        self.predictor = VelocityPredictor(cfg, params, self.calls)

    @classmethod
    def init(cls, cfg: ModelConfig, seed: int) -> "ARMFlow":
        store = ParameterStore()
        init = ParamInit(store, np.random.default_rng(seed))
        model = cls(cfg, store)
        model.encoder.init(init)
        model.predictor.init(init)
        return model


@dataclass(frozen=True)
class ToyFieldConfig:
    dim: int = 1
    hidden: int = 64
    mlp_layers: int = 3
    n_labels: int = 0
    freq_dim: int = 16


class ToyVelocityField(CheckpointMixin):
    """Velocity field over plain vectors; ``cond`` is None or label ids."""

    KIND = "toyflow"
    CONFIG = ToyFieldConfig

    def __init__(self, cfg: ToyFieldConfig, params: ParameterStore):
        self.cfg = cfg
        self.params = params
        self.calls: Counter = Counter()
        self.mlp = VelocityMLP("toy", cfg.hidden, cfg.mlp_layers, cfg.dim)

    @classmethod
    def init(cls, cfg: ToyFieldConfig, seed: int) -> "ToyVelocityField":
        store = ParameterStore()
        init = ParamInit(store, np.random.default_rng(seed))
        init.linear("toy.in", cfg.dim, cfg.hidden)
        init.timestep("toy.temb_r", cfg.freq_dim, cfg.hidden)
        init.timestep("toy.temb_t", cfg.freq_dim, cfg.hidden)
        if cfg.n_labels:
            init.normal("toy.label", (cfg.n_labels + 1, cfg.hidden), 1.0)
        model = cls(cfg, store)
        model.mlp.init(init)
        return model

    def __call__(self, z, r, t, cond: Optional[np.ndarray] = None):
        p, cfg = self.params, self.cfg
        self.calls["forward"] += 1
        h = linear(p, "toy.in", z)
        c = ops.add(
            timestep_embedding(p, "toy.temb_r", r, cfg.freq_dim),
            timestep_embedding(p, "toy.temb_t", t, cfg.freq_dim),
        )
        if cfg.n_labels and cond is not None:
            labels = _label_ids(np.asarray(cond, dtype=np.int64), cfg.n_labels)
            c = ops.add(c, ops.embedding(p["toy.label"], labels))
        return self.mlp(p, h, c)

    def null_condition(self, cond):
        if cond is None:
            return None
        return np.full(np.shape(cond), NULL_LABEL)

    def dropped(self, cond) -> np.ndarray:
        if cond is None:
            return np.asarray(True)
        return np.asarray(cond) == NULL_LABEL
