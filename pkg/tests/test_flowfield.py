import numpy as np
import pytest

from armflow.autodiff import Value, as_array, backward, finite_diff_directional, jvp
from armflow.errors import ContractViolationError, NumericError
from armflow.eval.metrics import wasserstein1_marginal
from armflow.flow.analytic import GaussianMixture2D, StandardNormal1D, analytic_gaussian_velocity
from armflow.flow.field import (
    CfgParams,
    TimestepSamplerConfig,
    cfg_target,
    conditional_velocity,
    interpolate,
    make_path_sample,
    meanflow_loss,
    meanflow_target,
    multi_step_euler_sample,
    objective_timesteps,
    regression_loss,
    sample_timestep_pair,
    sample_timesteps,
    sample_tokens,
    single_step_sample,
)
from armflow.nn.models import NULL_LABEL, ToyFieldConfig, ToyVelocityField

from .conftest import randomize, relative_error


class ConstantField:
    def __init__(self, value):
        self.value = value
        self.calls = 0

    def __call__(self, z, r, t, cond):
        self.calls += 1
        return Value(np.full(np.shape(as_array(z)), self.value))

    def null_condition(self, cond):
        return None

    def dropped(self, cond):
        return np.zeros(1, dtype=bool)


class IdentityField(ConstantField):
    """u(z, r, t) = z."""

    def __init__(self):
        super().__init__(0.0)

    def __call__(self, z, r, t, cond):
        self.calls += 1
        return z


class AnalyticField(ConstantField):
    """Instantaneous marginal velocity of N(mean, std^2) data; ignores r."""

    def __init__(self, mean=0.0, std=1.0):
        super().__init__(0.0)
        self.mean, self.std = mean, std

    def __call__(self, z, r, t, cond):
        self.calls += 1
        t = np.asarray(t, dtype=np.float64).reshape(-1, 1)
        return analytic_gaussian_velocity(as_array(z), t, self.mean, self.std)


@pytest.fixture
def toy_field():
    model = ToyVelocityField.init(ToyFieldConfig(dim=2, hidden=16, mlp_layers=2, freq_dim=8), 0)
    randomize(model.params, seed=5)
    return model


@pytest.fixture
def labelled_field():
    cfg = ToyFieldConfig(dim=2, hidden=16, mlp_layers=2, n_labels=3, freq_dim=8)
    model = ToyVelocityField.init(cfg, 1)
    randomize(model.params, seed=6)
    return model


def test_path_is_linear_and_velocity_is_exact(rng):
    x, eps = rng.standard_normal((5, 3)), rng.standard_normal((5, 3))
    t = rng.random(5)
    np.testing.assert_array_equal(interpolate(x, eps, t), (1 - t[:, None]) * x + t[:, None] * eps)
    np.testing.assert_array_equal(conditional_velocity(x, eps), eps - x)
    np.testing.assert_array_equal(interpolate(x, eps, 1.0), eps)
    np.testing.assert_array_equal(interpolate(x, eps, 0.0), x)


def test_path_derivative_is_velocity(rng):
    x, eps = rng.standard_normal((4, 2)), rng.standard_normal((4, 2))
    fd = finite_diff_directional(lambda t: interpolate(x, eps, t), 0.37, 1.0)
    assert np.max(np.abs(fd - (eps - x))) < 1e-8


def test_timesteps_are_ordered_and_inside_unit_interval(rng):
    r, t = sample_timesteps(TimestepSamplerConfig(mu=-0.4, sigma=1.0, p_instant=0.25), rng, 10000)
    assert r.shape == t.shape == (10000,)
    assert np.all(r <= t)
    assert np.all((r > 0) & (t < 1))
    assert np.mean(r == t) == pytest.approx(0.25, abs=0.02)
    # the instantaneous pairs keep the logit-normal marginal
    instant = np.log(t[r == t] / (1.0 - t[r == t]))
    assert np.mean(instant) == pytest.approx(-0.4, abs=0.08)
    assert np.std(instant) == pytest.approx(1.0, abs=0.06)


def test_timestep_pair_is_one_draw_of_the_array_sampler():
    cfg = TimestepSamplerConfig(mu=-0.4, sigma=1.0, p_instant=0.25)
    pairs = [sample_timestep_pair(cfg, np.random.default_rng(s)) for s in range(200)]
    for s, pair in enumerate(pairs):
        r, t = sample_timesteps(cfg, np.random.default_rng(s))
        assert (pair.r, pair.t) == (float(r), float(t))
    assert all(0.0 < p.r <= p.t < 1.0 for p in pairs)
    assert 20 < sum(p.r == p.t for p in pairs) < 80
    instant = sample_timestep_pair(TimestepSamplerConfig(p_instant=1.0), np.random.default_rng(3))
    assert instant.r == instant.t


def test_path_sample_bundles_interpolant_and_velocity(rng):
    x, eps = rng.standard_normal((3, 2)), rng.standard_normal((3, 2))
    path = make_path_sample(x, eps, np.array([0.0, 0.5, 1.0]))
    np.testing.assert_array_equal(path.z_t[0], x[0])
    np.testing.assert_array_equal(path.z_t[2], eps[2])
    np.testing.assert_allclose(path.z_t[1], 0.5 * (x[1] + eps[1]))
    np.testing.assert_array_equal(path.v, eps - x)


def test_instantaneous_only_sampler_gives_equal_pairs(rng):
    r, t = sample_timesteps(TimestepSamplerConfig(p_instant=1.0), rng, (3, 7))
    assert r.shape == (3, 7)
    np.testing.assert_array_equal(r, t)


def test_rectified_objective_forces_instantaneous_pairs():
    cfg = TimestepSamplerConfig(mu=0.3, sigma=0.8, p_instant=0.1)
    assert objective_timesteps(cfg, "meanflow") is cfg
    rectified = objective_timesteps(cfg, "rectified")
    assert rectified.p_instant == 1.0 and rectified.mu == 0.3
    with pytest.raises(ContractViolationError):
        objective_timesteps(cfg, "ddim")


def test_target_equals_velocity_when_r_equals_t(rng, toy_field):
    z, v = rng.standard_normal((6, 2)), rng.standard_normal((6, 2))
    t = rng.random(6)
    target = meanflow_target(toy_field, z, t, t, None, v)
    assert np.max(np.abs(target.data - v)) < 1e-10


def test_target_of_constant_field_is_velocity(rng):
    z, v = rng.standard_normal((6, 2)), rng.standard_normal((6, 2))
    r, t = np.sort(rng.random((2, 6)), axis=0)
    target = meanflow_target(ConstantField(0.7), z, r, t, None, v)
    assert np.max(np.abs(target.data - v)) < 1e-10


def test_target_of_identity_field_shrinks_velocity(rng):
    z, v = rng.standard_normal((6, 2)), rng.standard_normal((6, 2))
    r, t = np.sort(rng.random((2, 6)), axis=0)
    target = meanflow_target(IdentityField(), z, r, t, None, v)
    expected = (1.0 - t + r)[:, None] * v
    assert np.max(np.abs(target.data - expected)) < 1e-10


def test_model_jvp_matches_finite_differences(rng, toy_field):
    z, v = rng.standard_normal((5, 2)), rng.standard_normal((5, 2))
    r, t = np.full(5, 0.2), np.full(5, 0.7)
    _, tangent = jvp(lambda z_, r_, t_: toy_field(z_, r_, t_, None), z, r, t, v, 0.0, 1.0)

    def along(s):
        return as_array(toy_field(z + s * v, r, t + s, None))

    fd = finite_diff_directional(along, 0.0, 1.0)
    assert relative_error(tangent.data, fd) < 1e-5


def test_guidance_of_one_reduces_to_plain_target(rng, labelled_field):
    z, v = rng.standard_normal((6, 2)), rng.standard_normal((6, 2))
    r, t = np.sort(rng.random((2, 6)), axis=0)
    labels = np.array([0, 1, 2, 0, 1, 2])
    plain = meanflow_target(labelled_field, z, r, t, labels, v)
    guided = cfg_target(labelled_field, z, r, t, labels, v, CfgParams(omega=1.0, p_drop=0.1))
    assert np.max(np.abs(plain.data - guided.data)) < 1e-12


def test_guided_target_keeps_velocity_for_dropped_rows_at_r_equals_t(rng, labelled_field):
    z, v = rng.standard_normal((4, 2)), rng.standard_normal((4, 2))
    t = np.full(4, 0.5)
    labels = np.array([NULL_LABEL, 1, NULL_LABEL, 2])
    target = cfg_target(labelled_field, z, t, t, labels, v, CfgParams(omega=2.0, p_drop=0.1))
    np.testing.assert_allclose(target.data[[0, 2]], v[[0, 2]], atol=1e-12)
    u_null = as_array(labelled_field(z, t, t, np.full(4, NULL_LABEL)))
    expected = 2.0 * v + (1.0 - 2.0) * u_null
    np.testing.assert_allclose(target.data[[1, 3]], expected[[1, 3]], atol=1e-12)


def test_guidance_strength_below_one_is_rejected():
    with pytest.raises(ValueError):
        CfgParams(omega=0.5)


def test_live_and_frozen_targets_give_identical_gradients(rng, toy_field):
    for _ in range(5):
        x, eps = rng.standard_normal((8, 2)), rng.standard_normal((8, 2))
        r, t = sample_timesteps(TimestepSamplerConfig(), rng, 8)
        live = backward(meanflow_loss(toy_field, x, eps, r, t, None), toy_field.params)

        z_t = interpolate(x, eps, t)
        frozen_target = meanflow_target(toy_field, z_t, r, t, None, eps - x).data.copy()
        frozen = backward(
            regression_loss(toy_field(z_t, r, t, None), frozen_target), toy_field.params
        )
        for name in live:
            assert np.max(np.abs(live[name] - frozen[name])) == 0.0


def test_gradient_step_lowers_loss_against_frozen_target(rng, toy_field):
    x, eps = rng.standard_normal((16, 2)), rng.standard_normal((16, 2))
    r, t = sample_timesteps(TimestepSamplerConfig(), rng, 16)
    z_t = interpolate(x, eps, t)
    target = meanflow_target(toy_field, z_t, r, t, None, eps - x).data.copy()
    loss = regression_loss(toy_field(z_t, r, t, None), target)
    grads = backward(loss, toy_field.params)
    for name, g in grads.items():
        toy_field.params.assign(name, toy_field.params[name].data - 1e-3 * g)
    after = regression_loss(toy_field(z_t, r, t, None), target)
    assert after.item() < loss.item()


def test_regression_loss_reports_first_bad_sample():
    prediction = Value(np.zeros((3, 2)))
    target = np.array([[0.0, 0.0], [np.nan, 0.0], [np.inf, 0.0]])
    with pytest.raises(NumericError) as info:
        regression_loss(prediction, target)
    assert info.value.index == 1


def test_meanflow_loss_needs_samples(toy_field):
    with pytest.raises(ContractViolationError):
        meanflow_loss(toy_field, np.zeros((0, 2)), np.zeros((0, 2)), [], [], None)


def test_single_step_is_one_model_call(rng):
    field = ConstantField(0.25)
    eps = rng.standard_normal((7, 3))
    sample = single_step_sample(field, eps, None)
    assert field.calls == 1
    np.testing.assert_allclose(sample, eps - 0.25)


def test_euler_sampler_uses_one_call_per_step(rng):
    field = ConstantField(0.0)
    multi_step_euler_sample(field, rng.standard_normal((2, 2)), None, 7)
    assert field.calls == 7
    with pytest.raises(ContractViolationError):
        multi_step_euler_sample(field, rng.standard_normal((2, 2)), None, 0)


def test_euler_on_linear_field_approaches_exponential_decay(rng):
    eps = rng.standard_normal((3, 2))
    for n in (10, 100, 1000):
        z = multi_step_euler_sample(IdentityField(), eps, None, n)
        assert np.max(np.abs(z - eps * np.exp(-1.0))) < 1.0 / n


def test_sample_tokens_dispatches_on_objective(rng):
    eps = rng.standard_normal((2, 2))
    field = ConstantField(0.0)
    sample_tokens(field, eps, None, "rectified", 4)
    assert field.calls == 4
    sample_tokens(field, eps, None, "meanflow")
    assert field.calls == 5
    with pytest.raises(ContractViolationError):
        sample_tokens(field, eps, None, "ddpm")


def test_analytic_field_anchors():
    z = np.linspace(-2.0, 2.0, 9)
    np.testing.assert_allclose(analytic_gaussian_velocity(z, 1.0, 0.5, 2.0), z - 0.5)
    np.testing.assert_allclose(analytic_gaussian_velocity(0.0, np.linspace(0, 1, 5), 0.0, 1.0), 0.0)
    for std in (0.0, -1.0, float("nan")):
        with pytest.raises(ContractViolationError, match="data_std"):
            analytic_gaussian_velocity(0.0, 0.5, 0.0, std)
    with pytest.raises(ContractViolationError):
        analytic_gaussian_velocity(0.0, 1.5, 0.0, 1.0)
    # t = 0 recovers E[eps - x | x = z] = -z
    np.testing.assert_allclose(analytic_gaussian_velocity(z, 0.0, 0.0, 1.0), -z)


def test_analytic_field_matches_monte_carlo():
    rng = np.random.default_rng(0)
    mean, std, t = 0.5, 1.5, 0.4
    x = mean + std * rng.standard_normal(1_000_000)
    eps = rng.standard_normal(1_000_000)
    z = (1 - t) * x + t * eps
    edges = np.linspace(-1.0, 2.0, 13)
    bins = np.digitize(z, edges)
    for b in range(1, len(edges)):
        inside = bins == b
        estimate = np.mean((eps - x)[inside])
        expected = analytic_gaussian_velocity(np.mean(z[inside]), t, mean, std)
        assert abs(estimate - expected) < 0.02


def test_euler_with_analytic_field_transports_noise_to_data():
    rng = np.random.default_rng(1)
    eps = rng.standard_normal((50_000, 1))
    samples = multi_step_euler_sample(AnalyticField(0.0, 1.0), eps, None, 100)
    reference = StandardNormal1D().sample(50_000, np.random.default_rng(2))
    assert wasserstein1_marginal(samples, reference) < 0.02


def test_toy_distributions_have_expected_shapes(rng):
    assert StandardNormal1D().sample(5, rng).shape == (5, 1)
    mixture = GaussianMixture2D()
    samples = mixture.sample(4000, rng)
    assert samples.shape == (4000, 2) and mixture.dim == 2
    np.testing.assert_allclose(samples.mean(axis=0), 0.0, atol=0.15)
