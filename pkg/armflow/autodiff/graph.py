"""Graph values, dual values and primitive dispatch.

Every differentiable computation in armflow goes through :func:`apply`, which
looks up a registered primitive and either

* records a reverse-mode node (arguments are :class:`Value`), or
* propagates a tangent alongside the primal (any argument is a
  :class:`DualValue`).

Forward mode never records reverse-mode nodes: JVP outputs only ever feed
gradient-blocked regression targets, so their graph would be thrown away.
"""

import itertools
from collections import Counter
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Any, Callable, Dict, Iterator, Optional, Tuple

import numpy as np

from ..errors import ShapeMismatchError, UnsupportedOperationError

_node_ids = itertools.count()
_grad_state = {"enabled": True}
_op_counts: Counter = Counter()


@dataclass(frozen=True)
class Primitive:
    """Forward, reverse (VJP) and forward-mode (JVP) rules over numpy arrays.

    ``vjp(g, xs, out, **params)`` returns one cotangent (or None) per input.
    ``jvp(ts, xs, out, **params)`` receives one tangent (or None for a
    constant) per input and returns the output tangent.
    """

    name: str
    forward: Callable[..., np.ndarray]
    vjp: Optional[Callable[..., Tuple[Optional[np.ndarray], ...]]]
    jvp: Optional[Callable[..., np.ndarray]]


PRIMITIVES: Dict[str, Primitive] = {}


def register(name: str, forward, vjp=None, jvp=None) -> Primitive:
    primitive = Primitive(name, forward, vjp, jvp)
    PRIMITIVES[name] = primitive
    return primitive


def grad_enabled() -> bool:
    return _grad_state["enabled"]


@contextmanager
def no_grad() -> Iterator[None]:
    """Evaluate without recording reverse-mode nodes."""
    previous = _grad_state["enabled"]
    _grad_state["enabled"] = False
    try:
        yield
    finally:
        _grad_state["enabled"] = previous


def op_counts() -> Dict[str, int]:
    return dict(_op_counts)


def reset_op_counts() -> None:
    _op_counts.clear()


def _frozen_array(data: Any) -> np.ndarray:
    array = np.asarray(data, dtype=np.float64)
    if array.flags.writeable:
        array = array.view()
        array.flags.writeable = False
    return array


class _Arithmetic:
    """Operator sugar shared by Value and DualValue; everything routes to apply."""

    __array_ufunc__ = None

    def __add__(self, other):
        return apply("add", self, other)

    def __radd__(self, other):
        return apply("add", other, self)

    def __sub__(self, other):
        return apply("add", self, apply("mul", other, -1.0))

    def __rsub__(self, other):
        return apply("add", other, apply("mul", self, -1.0))

    def __mul__(self, other):
        return apply("mul", self, other)

    def __rmul__(self, other):
        return apply("mul", other, self)

    def __neg__(self):
        return apply("mul", self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, _Arithmetic):
            raise UnsupportedOperationError("div", "only division by constants is supported")
        return apply("mul", self, 1.0 / np.asarray(other, dtype=np.float64))

    def __matmul__(self, other):
        return apply("matmul", self, other)

    def __rmatmul__(self, other):
        return apply("matmul", other, self)

    def __getitem__(self, index):
        return apply("getitem", self, index=index)

    def sum(self, axis=None, keepdims=False):
        return apply("sum", self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return apply("mean", self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return apply("reshape", self, shape=tuple(shape))


class Value(_Arithmetic):
    """A node in the computation graph holding a float64 array.

    Leaves created with ``requires_grad=True`` are parameters; every other
    Value is either a constant or the output of a recorded primitive.
    """

    __slots__ = ("data", "node_id", "parents", "backward_fn", "op", "requires_grad")

    def __init__(
        self,
        data: Any,
        requires_grad: bool = False,
        parents: Tuple[Any, ...] = (),
        backward_fn: Optional[Callable] = None,
        op: str = "leaf",
    ):
        self.data = _frozen_array(data)
        self.node_id = next(_node_ids)
        self.parents = parents
        self.backward_fn = backward_fn
        self.op = op
        self.requires_grad = requires_grad

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self) -> str:
        return f"Value(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"


class DualValue(_Arithmetic):
    """Primal and tangent carried together through forward-mode evaluation."""

    __slots__ = ("primal", "tangent")

    def __init__(self, primal: Any, tangent: Any = None):
        primal = primal if isinstance(primal, Value) else Value(primal)
        if tangent is None:
            tangent = Value(np.zeros_like(primal.data))
        elif not isinstance(tangent, Value):
            tangent = Value(np.broadcast_to(np.asarray(tangent, dtype=np.float64), primal.shape))
        if tangent.shape != primal.shape:
            raise ShapeMismatchError(
                f"tangent shape {tangent.shape} does not match primal shape {primal.shape}"
            )
        self.primal = primal
        self.tangent = tangent

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.primal.shape

    @property
    def ndim(self) -> int:
        return self.primal.ndim

    @property
    def data(self) -> np.ndarray:
        return self.primal.data

    def __repr__(self) -> str:
        return f"DualValue(shape={self.shape})"


def as_array(x: Any) -> np.ndarray:
    if isinstance(x, Value):
        return x.data
    if isinstance(x, DualValue):
        return x.primal.data
    return np.asarray(x, dtype=np.float64)


def _is_array_like(x: Any) -> bool:
    return isinstance(x, (_Arithmetic, np.ndarray, float, int, np.floating, np.integer))


def apply(name: str, *args: Any, **params: Any):
    """Evaluate primitive ``name`` on ``args`` in the mode the arguments imply."""
    primitive = PRIMITIVES.get(name)
    if primitive is None:
        raise UnsupportedOperationError(name, "no rules registered")
    _op_counts[name] += 1

    if any(isinstance(a, DualValue) for a in args):
        if primitive.jvp is None:
            raise UnsupportedOperationError(name, "no forward-mode rule registered")
        primals = [as_array(a) if _is_array_like(a) else a for a in args]
        tangents = [a.tangent.data if isinstance(a, DualValue) else None for a in args]
        out = primitive.forward(*primals, **params)
        if all(t is None for t in tangents):
            tangent = np.zeros_like(out)
        else:
            tangent = primitive.jvp(tangents, primals, out, **params)
        return DualValue(Value(out), Value(tangent))

    arrays = [as_array(a) if _is_array_like(a) else a for a in args]
    out = primitive.forward(*arrays, **params)
    tracked = (
        grad_enabled()
        and primitive.vjp is not None
        and any(isinstance(a, Value) and a.requires_grad for a in args)
    )
    if not tracked:
        return Value(out, op=name)

    def backward_fn(g: np.ndarray):
        return primitive.vjp(g, arrays, out, **params)

    return Value(out, requires_grad=True, parents=args, backward_fn=backward_fn, op=name)
