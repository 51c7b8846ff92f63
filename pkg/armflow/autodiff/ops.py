"""Registered primitives and the public op functions built on them.

Each primitive is defined by three numpy rules (forward, VJP, JVP). Model
code only ever calls the functions at the bottom of this module, which is
what lets the same network run under reverse mode, forward mode, or
neither.
"""

import math
from typing import Optional, Sequence

import numpy as np

from .graph import apply, register

GELU_C = math.sqrt(2.0 / math.pi)
GELU_A = 0.044715


def _unbroadcast(g: np.ndarray, shape: Sequence[int]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    shape = tuple(shape)
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, size in enumerate(shape) if size == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _tangent(t: Optional[np.ndarray], like: np.ndarray) -> np.ndarray:
    return np.zeros_like(like) if t is None else t


def _swap(x: np.ndarray) -> np.ndarray:
    return np.swapaxes(x, -1, -2)


# add / mul

def _add_vjp(g, xs, out):
    a, b = xs
    return _unbroadcast(g, np.shape(a)), _unbroadcast(g, np.shape(b))


def _add_jvp(ts, xs, out):
    total = np.zeros_like(out)
    for t in ts:
        if t is not None:
            total = total + t
    return total


def _mul_vjp(g, xs, out):
    a, b = xs
    return _unbroadcast(g * b, np.shape(a)), _unbroadcast(g * a, np.shape(b))


def _mul_jvp(ts, xs, out):
    (ta, tb), (a, b) = ts, xs
    total = np.zeros_like(out)
    if ta is not None:
        total = total + ta * b
    if tb is not None:
        total = total + a * tb
    return total


register("add", lambda a, b: np.add(a, b), _add_vjp, _add_jvp)
register("mul", lambda a, b: np.multiply(a, b), _mul_vjp, _mul_jvp)


# matmul / affine

def _matmul_vjp(g, xs, out):
    a, b = xs
    return _unbroadcast(g @ _swap(b), a.shape), _unbroadcast(_swap(a) @ g, b.shape)


def _matmul_jvp(ts, xs, out):
    (ta, tb), (a, b) = ts, xs
    total = np.zeros_like(out)
    if ta is not None:
        total = total + ta @ b
    if tb is not None:
        total = total + a @ tb
    return total


def _affine_vjp(g, xs, out):
    x, w, b = xs
    return (
        _unbroadcast(g @ w.T, x.shape),
        _unbroadcast(_swap(x) @ g, w.shape),
        _unbroadcast(g, b.shape),
    )


def _affine_jvp(ts, xs, out):
    (tx, tw, tb), (x, w, b) = ts, xs
    total = np.zeros_like(out)
    if tx is not None:
        total = total + tx @ w
    if tw is not None:
        total = total + x @ tw
    if tb is not None:
        total = total + tb
    return total


register("matmul", lambda a, b: np.matmul(a, b), _matmul_vjp, _matmul_jvp)
register("affine", lambda x, w, b: np.matmul(x, w) + b, _affine_vjp, _affine_jvp)


# elementwise nonlinearities

def _gelu_forward(x):
    return 0.5 * x * (1.0 + np.tanh(GELU_C * (x + GELU_A * x**3)))


def _gelu_derivative(x):
    th = np.tanh(GELU_C * (x + GELU_A * x**3))
    return 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th**2) * GELU_C * (1.0 + 3.0 * GELU_A * x**2)


register(
    "gelu",
    _gelu_forward,
    lambda g, xs, out: (g * _gelu_derivative(xs[0]),),
    lambda ts, xs, out: ts[0] * _gelu_derivative(xs[0]),
)
register(
    "exp",
    np.exp,
    lambda g, xs, out: (g * out,),
    lambda ts, xs, out: ts[0] * out,
)
register(
    "log",
    np.log,
    lambda g, xs, out: (g / xs[0],),
    lambda ts, xs, out: ts[0] / xs[0],
)
register(
    "sin",
    np.sin,
    lambda g, xs, out: (g * np.cos(xs[0]),),
    lambda ts, xs, out: ts[0] * np.cos(xs[0]),
)
register(
    "cos",
    np.cos,
    lambda g, xs, out: (-g * np.sin(xs[0]),),
    lambda ts, xs, out: -ts[0] * np.sin(xs[0]),
)


# normalisation

def _layer_norm_stats(x, eps):
    mu = x.mean(axis=-1, keepdims=True)
    inv_sigma = 1.0 / np.sqrt(x.var(axis=-1, keepdims=True) + eps)
    return (x - mu) * inv_sigma, inv_sigma


def _layer_norm_linear(d, xs, eps):
    # The layer-norm Jacobian is symmetric, so VJP and JVP share one map.
    xhat, inv_sigma = _layer_norm_stats(xs[0], eps)
    centered = d - d.mean(axis=-1, keepdims=True)
    return inv_sigma * (centered - xhat * (d * xhat).mean(axis=-1, keepdims=True))


register(
    "layer_norm",
    lambda x, eps=1e-6: _layer_norm_stats(x, eps)[0],
    lambda g, xs, out, eps=1e-6: (_layer_norm_linear(g, xs, eps),),
    lambda ts, xs, out, eps=1e-6: _layer_norm_linear(ts[0], xs, eps),
)


def _softmax_forward(x, axis=-1):
    shifted = np.exp(x - x.max(axis=axis, keepdims=True))
    return shifted / shifted.sum(axis=axis, keepdims=True)


register(
    "softmax",
    _softmax_forward,
    lambda g, xs, out, axis=-1: (out * (g - (g * out).sum(axis=axis, keepdims=True)),),
    lambda ts, xs, out, axis=-1: out * (ts[0] - (ts[0] * out).sum(axis=axis, keepdims=True)),
)


# structure

def _concat_vjp(g, xs, out, axis=-1):
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return tuple(np.split(g, bounds, axis=axis))


def _concat_jvp(ts, xs, out, axis=-1):
    return np.concatenate([_tangent(t, x) for t, x in zip(ts, xs)], axis=axis)


register(
    "concat",
    lambda *xs, axis=-1: np.concatenate(xs, axis=axis),
    _concat_vjp,
    _concat_jvp,
)


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(
        i is None or i is Ellipsis or isinstance(i, (slice, int, np.integer)) for i in items
    )


def _getitem_vjp(g, xs, out, index):
    full = np.zeros_like(xs[0])
    if _is_basic_index(index):
        full[index] += g
    else:
        # gathers may repeat an index
        np.add.at(full, index, g)
    return (full,)


register(
    "getitem",
    lambda x, index: np.array(x[index]),
    _getitem_vjp,
    lambda ts, xs, out, index: np.array(ts[0][index]),
)
register(
    "reshape",
    lambda x, shape: x.reshape(shape),
    lambda g, xs, out, shape: (g.reshape(xs[0].shape),),
    lambda ts, xs, out, shape: ts[0].reshape(shape),
)
register(
    "transpose",
    lambda x, axes: np.transpose(x, axes),
    lambda g, xs, out, axes: (np.transpose(g, np.argsort(axes)),),
    lambda ts, xs, out, axes: np.transpose(ts[0], axes),
)


def _expand_reduced(g, shape, axis, keepdims):
    if axis is not None and not keepdims:
        axes = (axis,) if np.isscalar(axis) else tuple(axis)
        axes = tuple(a % len(shape) for a in axes)
        for a in sorted(axes):
            g = np.expand_dims(g, a)
    return np.broadcast_to(g, shape)


def _reduced_size(shape, axis):
    if axis is None:
        return int(np.prod(shape))
    axes = (axis,) if np.isscalar(axis) else tuple(axis)
    return int(np.prod([shape[a] for a in axes]))


register(
    "sum",
    lambda x, axis=None, keepdims=False: np.sum(x, axis=axis, keepdims=keepdims),
    lambda g, xs, out, axis=None, keepdims=False: (
        _expand_reduced(g, xs[0].shape, axis, keepdims).copy(),
    ),
    lambda ts, xs, out, axis=None, keepdims=False: np.sum(ts[0], axis=axis, keepdims=keepdims),
)
register(
    "mean",
    lambda x, axis=None, keepdims=False: np.mean(x, axis=axis, keepdims=keepdims),
    lambda g, xs, out, axis=None, keepdims=False: (
        _expand_reduced(g, xs[0].shape, axis, keepdims) / _reduced_size(xs[0].shape, axis),
    ),
    lambda ts, xs, out, axis=None, keepdims=False: np.mean(ts[0], axis=axis, keepdims=keepdims),
)


def _embedding_vjp(g, xs, out, ids):
    full = np.zeros_like(xs[0])
    np.add.at(full, ids, g)
    return (full,)


register(
    "embedding",
    lambda table, ids: np.array(table[ids]),
    _embedding_vjp,
    lambda ts, xs, out, ids: np.array(ts[0][ids]),
)

# Forward value is passed through untouched; no VJP means no node is recorded.
register(
    "stop_gradient",
    lambda x: x,
    None,
    lambda ts, xs, out: np.zeros_like(out),
)


# public API

def add(a, b):
    return apply("add", a, b)


def mul(a, b):
    return apply("mul", a, b)


def matmul(a, b):
    return apply("matmul", a, b)


def affine(x, w, b):
    return apply("affine", x, w, b)


def gelu(x):
    return apply("gelu", x)


def exp(x):
    return apply("exp", x)


def log(x):
    return apply("log", x)


def sin(x):
    return apply("sin", x)


def cos(x):
    return apply("cos", x)


def layer_norm(x, eps: float = 1e-6):
    return apply("layer_norm", x, eps=eps)


def softmax(x, axis: int = -1):
    return apply("softmax", x, axis=axis)


def concat(xs, axis: int = -1):
    return apply("concat", *xs, axis=axis)


def getitem(x, index):
    return apply("getitem", x, index=index)


def reshape(x, shape):
    return apply("reshape", x, shape=tuple(shape))


def transpose(x, axes):
    return apply("transpose", x, axes=tuple(axes))


def sum(x, axis=None, keepdims: bool = False):  # noqa: A001
    return apply("sum", x, axis=axis, keepdims=keepdims)


def mean(x, axis=None, keepdims: bool = False):
    return apply("mean", x, axis=axis, keepdims=keepdims)


def embedding(table, ids):
    return apply("embedding", table, ids=np.asarray(ids, dtype=np.int64))


def stop_gradient(x):
    """Identity on values; blocks gradients and zeroes tangents."""
    return apply("stop_gradient", x)


def square(x):
    return apply("mul", x, x)


def log_softmax(x, axis: int = -1):
    """``x - logsumexp(x)`` with the max shifted out; exact at large logits."""
    shift = np.max(np.asarray(getattr(x, "data", x)), axis=axis, keepdims=True)
    z = add(x, -shift)
    return add(z, mul(log(sum(exp(z), axis=axis, keepdims=True)), -1.0))
