"""Reverse-mode gradients, forward-mode JVPs and the finite-difference oracle."""

from typing import Any, Callable, Dict, List, Mapping, Tuple

import numpy as np

from ..errors import ContractViolationError, NumericError
from .graph import DualValue, Value, as_array, no_grad


def _topological_order(root: Value) -> List[Value]:
    order: List[Value] = []
    seen = set()
    stack: List[Tuple[Value, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.node_id in seen:
            continue
        seen.add(node.node_id)
        stack.append((node, True))
        for parent in node.parents:
            if isinstance(parent, Value) and parent.requires_grad and parent.node_id not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Value, params: Mapping[str, Value]) -> Dict[str, np.ndarray]:
    """Return d(loss)/d(p) for every parameter, keyed like ``params``.

    The graph is not consumed: nodes keep their closures, so the same loss can
    be differentiated again. Parameters that do not reach the loss get zeros.
    """
    if not isinstance(loss, Value) or loss.data.size != 1:
        shape = getattr(loss, "shape", None)
        raise ContractViolationError(f"backward needs a scalar loss, got shape {shape}")

    grads: Dict[int, np.ndarray] = {}
    if loss.requires_grad:
        grads[loss.node_id] = np.ones_like(loss.data)
        for node in reversed(_topological_order(loss)):
            if node.backward_fn is None:
                continue
            g = grads.pop(node.node_id, None)
            if g is None:
                continue
            for parent, pg in zip(node.parents, node.backward_fn(g)):
                if pg is None or not isinstance(parent, Value) or not parent.requires_grad:
                    continue
                if parent.node_id in grads:
                    grads[parent.node_id] = grads[parent.node_id] + pg
                else:
                    grads[parent.node_id] = np.array(pg, dtype=np.float64)

    return {
        name: grads.get(value.node_id, np.zeros_like(value.data)).reshape(value.shape)
        for name, value in params.items()
    }


def jvp(
    f: Callable[[Any, Any, Any], Any],
    z: Any,
    r: Any,
    t: Any,
    tangent_z: Any,
    tangent_r: Any = 0.0,
    tangent_t: Any = 1.0,
) -> Tuple[Value, Value]:
    """Evaluate ``f(z, r, t)`` and its directional derivative in one pass.

    Runs under :func:`no_grad`: the result is only ever used inside a
    stop-gradient target, so no reverse graph is built for it.
    """
    with no_grad():
        duals = []
        for primal, tangent in ((z, tangent_z), (r, tangent_r), (t, tangent_t)):
            primal = as_array(primal)
            duals.append(DualValue(primal, np.broadcast_to(as_array(tangent), primal.shape)))
        out = f(*duals)
    if isinstance(out, DualValue):
        return out.primal, out.tangent
    value = out if isinstance(out, Value) else Value(out)
    return value, Value(np.zeros_like(value.data))


def finite_diff_directional(
    f: Callable[[np.ndarray], Any],
    point: Any,
    direction: Any,
    h: float = 1e-5,
) -> np.ndarray:
    """Central difference ``(f(p + h d) - f(p - h d)) / 2h`` per output coordinate."""
    if h <= 0:
        raise ContractViolationError(f"finite-difference step must be positive, got {h}")
    point = np.asarray(point, dtype=np.float64)
    direction = np.asarray(direction, dtype=np.float64)
    with no_grad():
        plus = as_array(f(point + h * direction))
        minus = as_array(f(point - h * direction))
    if not (np.all(np.isfinite(plus)) and np.all(np.isfinite(minus))):
        raise NumericError("non-finite function value in finite difference")
    return (plus - minus) / (2.0 * h)
