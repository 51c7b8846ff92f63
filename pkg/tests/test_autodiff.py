import numpy as np
import pytest

from armflow.autodiff import (
    PRIMITIVES,
    DualValue,
    Value,
    as_array,
    backward,
    finite_diff_directional,
    jvp,
    no_grad,
    ops,
)
from armflow.autodiff.graph import apply
from armflow.core.store import ParameterStore
from armflow.errors import (
    ContractViolationError,
    ShapeMismatchError,
    UnsupportedOperationError,
)
from armflow.nn.layers import ParamInit, linear, mlp

from .conftest import relative_error

IDS = np.array([2, 0, 1, 2])

# Primitive under test -> (function of one array, input shape).
UNARY_CASES = {
    "add": (lambda x: ops.add(x, np.linspace(-1.0, 1.0, 3)), (4, 3)),
    "mul": (lambda x: ops.mul(x, x), (4, 3)),
    "matmul": (lambda x: ops.matmul(x, ops.transpose(x, (1, 0))), (4, 3)),
    "affine": (lambda x: ops.affine(x, np.ones((3, 2)), np.arange(2.0)), (4, 3)),
    "gelu": (ops.gelu, (4, 3)),
    "exp": (ops.exp, (4, 3)),
    "log": (lambda x: ops.log(ops.add(ops.square(x), 1.0)), (4, 3)),
    "sin": (ops.sin, (4, 3)),
    "cos": (ops.cos, (4, 3)),
    "layer_norm": (ops.layer_norm, (4, 5)),
    "softmax": (ops.softmax, (4, 5)),
    "log_softmax": (ops.log_softmax, (4, 5)),
    "concat": (lambda x: ops.concat([x, ops.square(x)], axis=0), (4, 3)),
    "getitem": (lambda x: ops.getitem(x, (slice(None), slice(1, 3))), (4, 3)),
    "fancy_getitem": (lambda x: ops.getitem(x, (np.arange(4), np.array([0, 2, 1, 2]))), (4, 3)),
    "reshape": (lambda x: ops.reshape(x, (2, 6)), (4, 3)),
    "transpose": (lambda x: ops.transpose(x, (1, 0)), (4, 3)),
    "sum": (lambda x: ops.sum(x, axis=0), (4, 3)),
    "mean": (lambda x: ops.mean(x, axis=-1, keepdims=True), (4, 3)),
    "embedding": (lambda table: ops.embedding(table, IDS), (3, 5)),
}


def _reverse_error(fn, x, rng):
    weights = rng.standard_normal(as_array(fn(x)).shape)
    leaf = Value(x, requires_grad=True)
    grad = backward(ops.sum(ops.mul(fn(leaf), weights)), {"x": leaf})["x"]
    direction = rng.standard_normal(x.shape)
    fd = finite_diff_directional(lambda p: np.sum(as_array(fn(p)) * weights), x, direction)
    return relative_error(np.sum(grad * direction), fd)


def _forward_error(fn, x, rng):
    direction = rng.standard_normal(x.shape)
    _, tangent = jvp(lambda z, r, t: fn(z), x, 0.0, 0.0, direction, 0.0, 0.0)
    return relative_error(tangent.data, finite_diff_directional(fn, x, direction))


@pytest.mark.parametrize("case", sorted(UNARY_CASES))
def test_reverse_mode_matches_finite_differences(case):
    fn, shape = UNARY_CASES[case]
    rng = np.random.default_rng(sorted(UNARY_CASES).index(case))
    for _ in range(3):
        x = rng.uniform(-2.0, 2.0, size=shape)
        assert _reverse_error(fn, x, rng) < 1e-5


@pytest.mark.parametrize("case", sorted(UNARY_CASES))
def test_forward_mode_matches_finite_differences(case):
    fn, shape = UNARY_CASES[case]
    rng = np.random.default_rng(100 + sorted(UNARY_CASES).index(case))
    for _ in range(3):
        x = rng.uniform(-2.0, 2.0, size=shape)
        assert _forward_error(fn, x, rng) < 1e-5


def test_every_registered_primitive_is_covered():
    covered = {"add", "mul", "matmul", "affine", "stop_gradient"} | set(UNARY_CASES)
    assert set(PRIMITIVES) <= covered


def test_log_softmax_stays_finite_at_large_logits(rng):
    logits = rng.standard_normal((3, 4))
    expected = np.log(as_array(ops.softmax(logits)))
    np.testing.assert_allclose(as_array(ops.log_softmax(logits)), expected, atol=1e-12)
    far = np.array([[0.0, -2000.0, 5.0]])
    out = as_array(ops.log_softmax(far))
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(out, far - 5.0 - np.log1p(np.exp(-5.0)), atol=1e-12)


def test_stop_gradient_is_identity_with_zero_derivatives(rng):
    x = rng.standard_normal((3, 2))
    leaf = Value(x, requires_grad=True)
    out = ops.stop_gradient(leaf)
    assert np.array_equal(out.data, x)
    grads = backward(ops.sum(ops.mul(out, 3.0)), {"x": leaf})
    assert np.array_equal(grads["x"], np.zeros_like(x))
    _, tangent = jvp(lambda z, r, t: ops.stop_gradient(z), x, 0.0, 0.0, np.ones_like(x))
    assert np.array_equal(tangent.data, np.zeros_like(x))


def test_jvp_of_linear_map_is_exact(rng):
    a = rng.standard_normal((5, 3))
    z = rng.standard_normal((2, 3))
    d = rng.standard_normal((2, 3))
    primal, tangent = jvp(lambda z_, r, t: ops.matmul(z_, a.T), z, 0.0, 0.0, d)
    np.testing.assert_allclose(primal.data, z @ a.T, rtol=0, atol=1e-14)
    np.testing.assert_allclose(tangent.data, d @ a.T, rtol=0, atol=1e-14)


def test_jvp_time_tangent_is_default_direction():
    # f(z, r, t) = z * t: derivative along (0, 0, 1) is z
    z = np.array([1.5, -2.0])
    _, tangent = jvp(lambda z_, r, t: ops.mul(z_, t), z, 0.0, 0.5, np.zeros(2))
    np.testing.assert_allclose(tangent.data, z)


def test_jvp_records_no_reverse_graph(rng):
    store = ParameterStore({"w": rng.standard_normal((3, 3))})
    primal, tangent = jvp(lambda z, r, t: ops.matmul(z, store["w"]), np.ones((1, 3)), 0, 0, 1.0)
    assert not primal.requires_grad
    assert not tangent.requires_grad


def test_finite_difference_oracle_anchors():
    assert finite_diff_directional(lambda x: x * x, 3.0, 1.0) == pytest.approx(6.0, abs=1e-8)
    assert finite_diff_directional(np.sin, 0.0, 1.0) == pytest.approx(1.0, abs=1e-9)
    with pytest.raises(ContractViolationError):
        finite_diff_directional(np.sin, 0.0, 1.0, h=0.0)


def test_mlp_weight_gradients_match_finite_differences(rng):
    store = ParameterStore()
    init = ParamInit(store, rng)
    init.linear("in", 4, 8)
    init.mlp("body", 8, 16)
    init.linear("out", 8, 2)
    x = rng.standard_normal((5, 4))
    weights = rng.standard_normal((5, 2))

    def loss_value():
        h = ops.gelu(linear(store, "in", x))
        return ops.sum(ops.mul(linear(store, "out", ops.gelu(mlp(store, "body", h))), weights))

    grads = backward(loss_value(), store)
    for name in list(store):
        original = store[name].data.copy()
        direction = rng.standard_normal(original.shape)

        def f(p, name=name):
            store.assign(name, p)
            return loss_value().data

        fd = finite_diff_directional(f, original, direction)
        store.assign(name, original)
        assert relative_error(np.sum(grads[name] * direction), fd) < 1e-5, name


def test_unused_parameters_get_zero_gradients(rng):
    store = ParameterStore({"used": rng.standard_normal(3), "unused": rng.standard_normal(2)})
    grads = backward(ops.sum(ops.square(store["used"])), store)
    np.testing.assert_allclose(grads["used"], 2.0 * store["used"].data)
    assert np.array_equal(grads["unused"], np.zeros(2))


def test_backward_can_run_twice_on_same_graph(rng):
    leaf = Value(rng.standard_normal(4), requires_grad=True)
    loss = ops.sum(ops.exp(leaf))
    first = backward(loss, {"x": leaf})["x"]
    second = backward(loss, {"x": leaf})["x"]
    assert np.array_equal(first, second)


def test_backward_needs_scalar_loss(rng):
    leaf = Value(rng.standard_normal(4), requires_grad=True)
    with pytest.raises(ContractViolationError):
        backward(ops.exp(leaf), {"x": leaf})


def test_no_grad_stops_recording(rng):
    leaf = Value(rng.standard_normal(3), requires_grad=True)
    with no_grad():
        out = ops.exp(leaf)
    assert not out.requires_grad
    assert ops.exp(leaf).requires_grad


def test_unknown_primitive_and_value_division_are_rejected(rng):
    with pytest.raises(UnsupportedOperationError):
        apply("tanh", Value(np.ones(2)))
    with pytest.raises(UnsupportedOperationError):
        Value(np.ones(2)) / Value(np.ones(2))


def test_dual_value_rejects_mismatched_tangent():
    with pytest.raises(ShapeMismatchError):
        DualValue(np.ones(3), Value(np.ones(2)))


def test_values_are_read_only(rng):
    value = Value(rng.standard_normal(3))
    with pytest.raises(ValueError):
        value.data[0] = 1.0
