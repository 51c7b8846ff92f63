"""Functional layers over a :class:`ParameterStore`.

Every layer looks its weights up by name at call time, so the same code runs
with trainable leaves, frozen copies, or under forward mode, and the
optimizer can swap parameters between steps.
"""

import math
from typing import Callable, Optional, Sequence

import numpy as np

from ..autodiff import as_array, ops
from ..core.store import ParameterStore
from ..errors import ShapeMismatchError
from .cache import LayerCache

MASK_VALUE = -1e30


class ParamInit:
    """Adds freshly initialised weights to a store from one seeded generator."""

    def __init__(self, store: ParameterStore, rng: np.random.Generator):
        self.store = store
        self.rng = rng

    def normal(self, name: str, shape: Sequence[int], std: float) -> None:
        self.store.add(name, std * self.rng.standard_normal(tuple(shape)))

    def constant(self, name: str, shape: Sequence[int], value: float = 0.0) -> None:
        self.store.add(name, np.full(tuple(shape), value, dtype=np.float64))

    def linear(self, name: str, fan_in: int, fan_out: int, zero: bool = False) -> None:
        if zero:
            self.constant(f"{name}.w", (fan_in, fan_out))
        else:
            self.normal(f"{name}.w", (fan_in, fan_out), 1.0 / math.sqrt(fan_in))
        self.constant(f"{name}.b", (fan_out,))

    def mlp(self, name: str, dim: int, hidden: Optional[int] = None) -> None:
        hidden = hidden or dim
        self.linear(f"{name}.fc1", dim, hidden)
        self.linear(f"{name}.fc2", hidden, dim)

    def adaln(self, name: str, cond_dim: int, dim: int) -> None:
        """Projection to (shift, scale, gate); gates start at 1."""
        self.normal(f"{name}.mod.w", (cond_dim, 3 * dim), 1.0 / math.sqrt(cond_dim))
        self.store.add(f"{name}.mod.b", np.concatenate([np.zeros(2 * dim), np.ones(dim)]))

    def adaln_final(self, name: str, cond_dim: int, dim: int, out_dim: int) -> None:
        """Final modulation plus a zero-initialised output projection."""
        self.normal(f"{name}.mod.w", (cond_dim, 2 * dim), 1.0 / math.sqrt(cond_dim))
        self.constant(f"{name}.mod.b", (2 * dim,))
        self.linear(f"{name}.out", dim, out_dim, zero=True)

    def attention(self, name: str, dim: int) -> None:
        for proj in ("q", "k", "v", "o"):
            self.linear(f"{name}.{proj}", dim, dim)

    def timestep(self, name: str, freq_dim: int, dim: int) -> None:
        self.linear(f"{name}.fc1", freq_dim, dim)
        self.linear(f"{name}.fc2", dim, dim)


def linear(p: ParameterStore, name: str, x):
    return ops.affine(x, p[f"{name}.w"], p[f"{name}.b"])


def mlp(p: ParameterStore, name: str, x):
    return linear(p, f"{name}.fc2", ops.gelu(linear(p, f"{name}.fc1", x)))


def sinusoidal_embedding(t, dim: int, max_freq: float = 64.0):
    """sin/cos of ``t`` at geometric frequencies 1..max_freq; differentiable in t."""
    column = ops.reshape(t, (-1, 1))
    args = ops.mul(column, np.geomspace(1.0, max_freq, dim // 2))
    return ops.concat([ops.sin(args), ops.cos(args)], axis=-1)


def timestep_embedding(p: ParameterStore, name: str, t, freq_dim: int):
    return mlp(p, name, sinusoidal_embedding(t, freq_dim))


def positional_encoding(n: int, dim: int) -> np.ndarray:
    """Fixed transformer sinusoids, shape (n, dim)."""
    position = np.arange(n, dtype=np.float64)[:, None]
    div = np.exp(-math.log(10000.0) * np.arange(0, dim, 2, dtype=np.float64) / dim)
    table = np.zeros((n, dim))
    table[:, 0::2] = np.sin(position * div)
    table[:, 1::2] = np.cos(position * div)[:, : dim // 2]
    return table


def _per_token(mod, ndim: int):
    if ndim == 3:
        return ops.reshape(mod, (mod.shape[0], 1, mod.shape[-1]))
    return mod


def _chunks(x, n: int):
    size = x.shape[-1] // n
    return [ops.getitem(x, (Ellipsis, slice(i * size, (i + 1) * size))) for i in range(n)]


def modulate(h, shift, scale, gate, inner: Callable):
    """``h + gate * inner(LN(h) * (1 + scale) + shift)``."""
    normed = ops.add(ops.mul(ops.layer_norm(h), ops.add(scale, 1.0)), shift)
    return ops.add(h, ops.mul(gate, inner(normed)))


def adaln_modulate(p: ParameterStore, name: str, h, cond, inner: Callable):
    """Gated residual block whose normalisation is driven by ``cond``."""
    mod = _per_token(linear(p, f"{name}.mod", ops.gelu(cond)), len(h.shape))
    shift, scale, gate = _chunks(mod, 3)
    return modulate(h, shift, scale, gate, inner)


def adaln_final(p: ParameterStore, name: str, h, cond):
    mod = _per_token(linear(p, f"{name}.mod", ops.gelu(cond)), len(h.shape))
    shift, scale = _chunks(mod, 2)
    normed = ops.add(ops.mul(ops.layer_norm(h), ops.add(scale, 1.0)), shift)
    return linear(p, f"{name}.out", normed)


def causal_mask(n: int) -> np.ndarray:
    return np.triu(np.full((n, n), MASK_VALUE), k=1)


def _split_heads(x, n_heads: int):
    b, n, d = x.shape
    return ops.transpose(ops.reshape(x, (b, n, n_heads, d // n_heads)), (0, 2, 1, 3))


def _merge_heads(x):
    b, h, n, dh = x.shape
    return ops.reshape(ops.transpose(x, (0, 2, 1, 3)), (b, n, h * dh))


def _attend(q, keys, values, mask=None):
    scores = ops.mul(ops.matmul(q, ops.transpose(keys, (0, 1, 3, 2))), 1.0 / math.sqrt(q.shape[-1]))
    if mask is not None:
        scores = ops.add(scores, mask)
    return ops.matmul(ops.softmax(scores, axis=-1), values)


def self_attention(p: ParameterStore, name: str, x, n_heads: int, causal: bool = False):
    q = _split_heads(linear(p, f"{name}.q", x), n_heads)
    k = _split_heads(linear(p, f"{name}.k", x), n_heads)
    v = _split_heads(linear(p, f"{name}.v", x), n_heads)
    mask = causal_mask(x.shape[1]) if causal else None
    return linear(p, f"{name}.o", _merge_heads(_attend(q, k, v, mask)))


def cached_attention(p: ParameterStore, name: str, x, layer: LayerCache, n_heads: int):
    """Attention for one new position against every cached key and value."""
    q = _split_heads(linear(p, f"{name}.q", x), n_heads)
    k = _split_heads(linear(p, f"{name}.k", x), n_heads)
    v = _split_heads(linear(p, f"{name}.v", x), n_heads)
    layer.append(as_array(k), as_array(v))
    keys, values = layer.view()
    return linear(p, f"{name}.o", _merge_heads(_attend(q, keys, values)))


def causal_conv1d(p: ParameterStore, name: str, x, kernel: int, stride: int = 1):
    """Left-padded strided conv over (B, T, C); output o sees inputs <= o*stride + stride - 1."""
    b, length, channels = x.shape
    if length % stride:
        raise ShapeMismatchError(f"sequence length {length} is not a multiple of stride {stride}")
    pad = kernel - stride
    if pad > 0:
        x = ops.concat([np.zeros((b, pad, channels)), x], axis=1)
    n_out = length // stride
    span = stride * (n_out - 1) + 1
    columns = [ops.getitem(x, (slice(None), slice(j, j + span, stride))) for j in range(kernel)]
    return linear(p, name, ops.concat(columns, axis=-1))


def upsample(x, factor: int):
    """Nearest-neighbour repeat along time."""
    b, length, channels = x.shape
    expanded = ops.reshape(x, (b, length, 1, channels))
    repeated = ops.concat([expanded] * factor, axis=2)
    return ops.reshape(repeated, (b, length * factor, channels))


def mask_mix(x, replacement, mask: np.ndarray):
    """Rows where ``mask`` is set take ``replacement``; the others keep ``x``."""
    mask = np.asarray(mask, dtype=np.float64)
    mask = mask.reshape(mask.shape + (1,) * (len(x.shape) - mask.ndim))
    return ops.add(ops.mul(x, 1.0 - mask), ops.mul(replacement, mask))
