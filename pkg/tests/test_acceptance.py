"""Desk-scale training runs checked against closed-form targets.

Deselected by default; run with ``pytest -m slow``.
"""

import time

import numpy as np
import pytest

from armflow.autodiff import no_grad
from armflow.data import (
    TokenizedDataset,
    ToyDataConfig,
    analytic_responses,
    detokenize,
    make_splits,
    tokenize,
)
from armflow.eval import (
    EmbedderConfig,
    drift_auc,
    drift_curve,
    frechet_feature_distance,
    train_embedder,
    wasserstein1_marginals,
)
from armflow.flow.analytic import GaussianMixture2D, StandardNormal1D, analytic_gaussian_velocity
from armflow.flow.field import (
    CfgParams,
    TimestepSamplerConfig,
    meanflow_loss,
    multi_step_euler_sample,
    sample_timesteps,
    single_step_sample,
)
from armflow.nn.cache import ContextBuffer
from armflow.nn.models import (
    REACTOR,
    ARMFlow,
    Condition,
    ModelConfig,
    PredictorCondition,
    ReMFlow,
    ToyFieldConfig,
    ToyVelocityField,
)
from armflow.nn.vae import MotionVAE, VaeConfig
from armflow.sampler import GenerationRequest, online_generate_request
from armflow.train import (
    AdamState,
    BsceSchedule,
    TrainConfig,
    TrainingRun,
    bsce_train_step,
    toy_train_step,
)
from armflow.train.runner import offline_step_fn, online_step_fn, vae_step_fn

pytestmark = pytest.mark.slow

N_REFERENCE = 100_000


def _train_toy(distribution, iterations: int, seed: int = 0) -> ToyVelocityField:
    field_cfg = ToyFieldConfig(dim=distribution.dim, hidden=64, mlp_layers=3)
    model = ToyVelocityField.init(field_cfg, seed)
    cfg = TrainConfig(
        lr=1e-3,
        batch_size=256,
        max_iterations=iterations,
        seed=seed,
        timesteps=TimestepSamplerConfig(mu=-0.4, sigma=1.0, p_instant=0.25),
    )
    rng, state = np.random.default_rng(seed), AdamState()
    for _ in range(iterations):
        toy_train_step(model, distribution.sample(cfg.batch_size, rng), state, cfg, rng)
    return model


def _w1(model, distribution, sampler, seed: int = 1) -> np.ndarray:
    rng = np.random.default_rng(seed)
    eps = rng.standard_normal((N_REFERENCE, distribution.dim))
    return wasserstein1_marginals(sampler(model, eps), distribution.sample(N_REFERENCE, rng))


def _one_step(model, eps):
    return single_step_sample(model, eps, None)


def _euler(model, eps):
    return multi_step_euler_sample(model, eps, None, 100)


@pytest.fixture(scope="module")
def normal_model():
    return _train_toy(StandardNormal1D(), 3000)


def test_one_step_samples_match_standard_normal(normal_model):
    samples = _one_step(normal_model, np.random.default_rng(2).standard_normal((10_000, 1)))
    assert abs(samples.mean()) < 0.05
    assert abs(samples.std() - 1.0) < 0.05
    assert _w1(normal_model, StandardNormal1D(), _one_step)[0] < 0.05


def test_one_step_keeps_up_with_euler(normal_model):
    one_step = _w1(normal_model, StandardNormal1D(), _one_step)[0]
    euler = _w1(normal_model, StandardNormal1D(), _euler)[0]
    # both can sit at the sampling-noise floor, where the ratio means nothing
    assert one_step <= max(1.5 * euler, 0.02)


def test_instantaneous_field_matches_closed_form(normal_model):
    z, t = np.meshgrid(np.linspace(-2.0, 2.0, 41), np.linspace(0.05, 0.95, 19))
    z, t = z.ravel(), t.ravel()
    with no_grad():
        u = normal_model(z[:, None], t, t).data[:, 0]
    assert np.max(np.abs(u - analytic_gaussian_velocity(z, t, 0.0, 1.0))) < 0.05


def test_one_step_samples_match_gaussian_mixture():
    mixture = GaussianMixture2D()
    model = _train_toy(mixture, 6000)
    one_step = _w1(model, mixture, _one_step)
    assert np.all(one_step < 0.10)
    euler = _w1(model, mixture, _euler)
    assert np.all(one_step <= np.maximum(1.5 * euler, 0.03))


def test_vae_reconstructs_toy_motion(tmp_path):
    train, test = make_splits(400, 40, ToyDataConfig(length=32), seed=0)
    vae = MotionVAE.init(VaeConfig(latent=8, hidden=32, layers_per_block=2), 0)
    cfg = TrainConfig(lr=1e-3, batch_size=32, max_iterations=3000, checkpoint_every=3000)
    TrainingRun(tmp_path, vae, cfg, vae_step_fn(vae, train, cfg)).run()

    actor, reactor = tokenize(vae, test.actor, test.reactor)
    assert np.mean((detokenize(vae, actor, "actor", 32) - test.actor) ** 2) < 0.01
    assert np.mean((detokenize(vae, reactor, "reactor", 32) - test.reactor) ** 2) < 0.01


# Reaction runs work on frame tokens: FRAMES_PER_TOKEN normalised frames per
# token, so decoding is a reshape and no VAE error enters the comparison.
FRAMES_PER_TOKEN = 4
REACTION_SEEDS = (0, 1, 2)
REACTION_ITERATIONS = 600


class FrameTokens:
    def __init__(self, reference: np.ndarray):
        self.scale = reference.reshape(-1, reference.shape[-1]).std(axis=0)

    def encode(self, frames: np.ndarray) -> np.ndarray:
        b, t, c = frames.shape
        return (frames / self.scale).reshape(b, t // FRAMES_PER_TOKEN, FRAMES_PER_TOKEN * c)

    def decode(self, tokens: np.ndarray) -> np.ndarray:
        b, n, d = tokens.shape
        return tokens.reshape(b, n * FRAMES_PER_TOKEN, d // FRAMES_PER_TOKEN) * self.scale


def _reaction_model(seed: int, model_cls=ARMFlow):
    cfg = ModelConfig(
        token_dim=4 * FRAMES_PER_TOKEN,
        hidden=48,
        n_layers=2,
        n_heads=4,
        mlp_layers=2,
        max_tokens=8,
        freq_dim=16,
    )
    return model_cls.init(cfg, seed)


def _reaction_config(seed: int, objective: str = "meanflow", iterations=REACTION_ITERATIONS):
    return TrainConfig(
        lr=1e-3,
        batch_size=32,
        max_iterations=iterations,
        seed=seed,
        guidance=CfgParams(omega=1.0, p_drop=0.1),
        timesteps=TimestepSamplerConfig(mu=-0.4, sigma=1.0, p_instant=0.25),
        objective=objective,
        euler_steps=10,
        checkpoint_every=iterations,
    )


def _train_online(out, data, strategy, seed, objective="meanflow"):
    model = _reaction_model(seed)
    cfg = _reaction_config(seed, objective)
    step = online_step_fn(model, data, cfg, strategy, BsceSchedule(k_max=8))
    TrainingRun(out / f"{objective}-{strategy}-{seed}", model, cfg, step).run()
    return model


def _generate(model, actor_tokens, labels, objective="meanflow"):
    request = GenerationRequest(
        actor_tokens, labels, seed=100, mode="online", objective=objective, euler_steps=10
    )
    return online_generate_request(model, request).tokens


class ReactionBench:
    def __init__(self, out):
        self.out = out
        self.train, self.test = make_splits(256, 64, ToyDataConfig(length=32), seed=0)
        self.codec = FrameTokens(self.train.reactor)
        self.data = TokenizedDataset(
            self.codec.encode(self.train.actor),
            self.codec.encode(self.train.reactor),
            self.train.labels,
            32,
        )
        self.actor_tokens = self.codec.encode(self.test.actor)
        self.reactor_tokens = self.codec.encode(self.test.reactor)
        self.reference = analytic_responses(self.test.actor, self.test.labels, self.test.cfg)
        self.embedder, _ = train_embedder(
            EmbedderConfig(), self.train, self.test, enforce_gate=False
        )
        self.models = {}

    def model(self, strategy, seed, objective="meanflow"):
        key = (strategy, seed, objective)
        if key not in self.models:
            self.models[key] = _train_online(self.out, self.data, strategy, seed, objective)
        return self.models[key]

    def score(self, strategy, seed, objective="meanflow"):
        """(drift AUC, FFD) of the online generations for the test actors."""
        tokens = _generate(
            self.model(strategy, seed, objective), self.actor_tokens, self.test.labels, objective
        )
        frames = self.codec.decode(tokens)
        curve = drift_curve(frames, self.reference, 4, FRAMES_PER_TOKEN)
        generated = self.embedder.embed(self.test.actor, frames)
        real = self.embedder.embed(self.test.actor, self.test.reactor)
        return drift_auc(curve), frechet_feature_distance(generated, real)


@pytest.fixture(scope="module")
def bench(tmp_path_factory):
    return ReactionBench(tmp_path_factory.mktemp("reaction"))


def test_bootstrap_training_drifts_less_than_ground_truth_encoding(bench):
    scores = {
        strategy: np.mean([bench.score(strategy, seed) for seed in REACTION_SEEDS], axis=0)
        for strategy in ("bsce", "gte", "rollout")
    }
    bsce, gte, rollout = scores["bsce"], scores["gte"], scores["rollout"]
    assert bsce[0] < gte[0], scores
    assert bsce[1] < gte[1], scores
    # mixing in generated history helps less than training on full rollouts
    assert rollout[0] >= bsce[0], scores


def test_one_step_meanflow_matches_ten_step_rectified_flow(bench):
    _, meanflow = bench.score("bsce", 0)
    _, rectified = bench.score("bsce", 0, objective="rectified")
    assert meanflow <= 1.1 * rectified


def _teacher_forced_loss(model, actor, reactor, labels, history, seed=5):
    """Mean per-token MeanFlow loss on ``reactor`` when the encoder reads ``history``."""
    b, n, d = actor.shape
    buffer = ContextBuffer.from_tokens(actor[:, : n - 1], history[:, : n - 1], model.cfg.max_tokens)
    with no_grad():
        context = model.encoder.encode(buffer, Condition(labels)).data
    rng = np.random.default_rng(seed)
    r, t = sample_timesteps(TimestepSamplerConfig(mu=-0.4, sigma=1.0), rng, b * n)
    eps = rng.standard_normal((b * n, d))
    cond = PredictorCondition.build(
        context.reshape(b * n, -1), actor.reshape(b * n, d), REACTOR
    )
    return meanflow_loss(model.predictor, reactor.reshape(b * n, d), eps, r, t, cond).item()


def test_ground_truth_encoding_suffers_exposure_bias(bench):
    model = bench.model("gte", 0)
    actor, reactor, labels = bench.actor_tokens, bench.reactor_tokens, bench.test.labels
    generated = _generate(model, actor, labels)
    on_truth = _teacher_forced_loss(model, actor, reactor, labels, reactor)
    on_own = _teacher_forced_loss(model, actor, reactor, labels, generated)
    assert on_truth < on_own


def test_bootstrap_step_cost_is_linear_in_depth():
    train, _ = make_splits(32, 4, ToyDataConfig(length=32), seed=1)
    codec = FrameTokens(train.reactor)
    data = TokenizedDataset(
        codec.encode(train.actor), codec.encode(train.reactor), train.labels, 32
    )
    model = _reaction_model(0)
    cfg = _reaction_config(0, iterations=1)
    batch = data.sample_batch(np.random.default_rng(0), 16)
    depths = np.array([1, 2, 4, 8])
    seconds = []
    for k in depths:
        runs = []
        for repeat in range(5):
            rng, state = np.random.default_rng(repeat), AdamState()
            start = time.perf_counter()
            bsce_train_step(model, batch, state, cfg, rng, BsceSchedule(k_max=int(k)), 1)
            runs.append(time.perf_counter() - start)
        seconds.append(min(runs))
    slope, _ = np.polyfit(depths, seconds, 1)
    local = np.diff(seconds) / np.diff(depths)
    assert slope > 0
    assert np.all((local > 0.5 * slope) & (local < 2.0 * slope)), (seconds, slope)


def test_offline_model_loss_decreases(tmp_path):
    train, _ = make_splits(128, 4, ToyDataConfig(length=32), seed=2)
    codec = FrameTokens(train.reactor)
    data = TokenizedDataset(
        codec.encode(train.actor), codec.encode(train.reactor), train.labels, 32
    )
    model = _reaction_model(0, ReMFlow)
    cfg = _reaction_config(0, iterations=500)
    run = TrainingRun(tmp_path, model, cfg, offline_step_fn(model, data, cfg))
    run.run()
    window = 50
    moving = np.convolve(run.losses, np.ones(window) / window, mode="valid")
    assert len(run.losses) == 500
    assert moving[-1] < moving[0]
