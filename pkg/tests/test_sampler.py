import numpy as np
import pytest

from armflow.errors import CapacityError, ContractViolationError, MissingArtifactError
from armflow.nn.models import ARMFlow, Condition, ReMFlow
from armflow.nn.vae import MotionVAE
from armflow.sampler import (
    GenerationRequest,
    OnlineTrace,
    decode_generation,
    noise_generator,
    offline_generate,
    online_generate,
    online_generate_request,
    read_generation,
    replay_generate,
    write_generation,
)

from .conftest import randomize


@pytest.fixture
def armflow_model(model_cfg):
    model = ARMFlow.init(model_cfg, 0)
    randomize(model.params, seed=31)
    return model


@pytest.fixture
def remflow_model(model_cfg):
    model = ReMFlow.init(model_cfg, 0)
    randomize(model.params, seed=32)
    return model


@pytest.fixture
def actor(rng):
    return rng.standard_normal((3, 7, 4))


def _stream(tokens):
    """(B, N, L) tokens as an iterator of N (B, L) actor tokens."""
    return iter(tokens.transpose(1, 0, 2))


def test_offline_generation_is_one_forward_pass(remflow_model, actor):
    request = GenerationRequest(actor, [0, 1, 2], seed=5)
    generation = offline_generate(remflow_model, request)
    assert generation.tokens.shape == actor.shape
    assert generation.calls == {"forward": 1}


def test_offline_generation_is_seeded(remflow_model, actor):
    a = offline_generate(remflow_model, GenerationRequest(actor, [0, 1, 2], seed=5)).tokens
    b = offline_generate(remflow_model, GenerationRequest(actor, [0, 1, 2], seed=5)).tokens
    c = offline_generate(remflow_model, GenerationRequest(actor, [0, 1, 2], seed=6)).tokens
    np.testing.assert_array_equal(a, b)
    assert not np.allclose(a, c)


def test_offline_generation_rejects_wrong_token_dim(remflow_model, rng):
    with pytest.raises(ContractViolationError):
        offline_generate(remflow_model, GenerationRequest(rng.standard_normal((1, 3, 5)), [0]))
    with pytest.raises(ContractViolationError):
        online = GenerationRequest(rng.standard_normal((1, 3, 4)), [0], mode="online")
        offline_generate(remflow_model, online)


def test_online_call_budget(armflow_model, actor):
    generation = online_generate_request(
        armflow_model, GenerationRequest(actor, [0, 1, 2], seed=1, mode="online")
    )
    n_tokens = actor.shape[1]
    assert generation.tokens.shape == actor.shape
    assert generation.calls["predictor"] == n_tokens
    assert generation.calls["encoder"] == n_tokens + 1
    assert len(generation.token_us) == n_tokens


def test_online_euler_costs_one_predictor_call_per_step(armflow_model, actor):
    request = GenerationRequest(
        actor, [0, 1, 2], seed=1, mode="online", objective="rectified", euler_steps=3
    )
    generation = online_generate_request(armflow_model, request)
    assert generation.calls["predictor"] == 3 * actor.shape[1]
    assert generation.calls["encoder"] == actor.shape[1] + 1


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_online_matches_full_recompute_replay(armflow_model, actor, seed):
    cond = Condition(np.array([2, 0, 1]))
    streamed = np.stack(
        list(online_generate(armflow_model, _stream(actor), cond, noise_generator(seed))), axis=1
    )
    replayed = replay_generate(armflow_model, actor, cond, noise_generator(seed))
    assert np.max(np.abs(streamed - replayed)) < 1e-6


def test_online_outputs_never_see_future_actor_tokens(armflow_model, actor, rng):
    cond = Condition(np.array([0, 1, 2]))

    def run(stream):
        tokens = online_generate(armflow_model, _stream(stream), cond, noise_generator(4))
        return np.stack(list(tokens), axis=1)

    base = run(actor)
    for j in (2, 5):
        changed = actor.copy()
        changed[:, j:] += rng.standard_normal(changed[:, j:].shape)
        out = run(changed)
        np.testing.assert_array_equal(out[:, :j], base[:, :j])
        assert not np.allclose(out[:, j], base[:, j])


def test_online_stream_beyond_capacity_fails(armflow_model, model_cfg, rng):
    stream = rng.standard_normal((model_cfg.max_tokens + 1, 1, 4))
    cond = Condition(np.array([0]))
    tokens = online_generate(armflow_model, iter(stream), cond, noise_generator(0))
    with pytest.raises(CapacityError):
        list(tokens)


def test_online_trace_records_latency(armflow_model, actor):
    trace = OnlineTrace()
    cond = Condition(np.array([0, 1, 2]))
    list(online_generate(armflow_model, _stream(actor), cond, noise_generator(0), trace=trace))
    assert len(trace.token_us) == actor.shape[1] and trace.mean_us > 0


def test_request_validation(actor):
    with pytest.raises(ContractViolationError):
        GenerationRequest(actor[0], [0])
    with pytest.raises(ContractViolationError):
        GenerationRequest(actor, [0, 1])
    with pytest.raises(ContractViolationError):
        GenerationRequest(actor, [0, 1, 2], mode="batch")
    assert GenerationRequest(actor[:1], 2).labels.tolist() == [2]


def test_decoded_generation_has_requested_length(vae_cfg, actor):
    vae = MotionVAE.init(vae_cfg, 0)
    frames = decode_generation(vae, actor, length=26)
    assert frames.shape == (3, 26, 4)
    assert decode_generation(vae, actor[0]).shape == (1, 28, 4)


@pytest.mark.parametrize("fmt", ["npz", "csv"])
def test_generation_files_read_back(remflow_model, actor, rng, tmp_path, fmt):
    generation = offline_generate(remflow_model, GenerationRequest(actor, [0, 1, 2], seed=9))
    generation.provenance = {"checkpoint_hash": "abc"}
    frames = rng.standard_normal((3, 28, 4))
    written = write_generation(tmp_path / "gen", generation, frames, fmt)
    assert all(p.exists() for p in written)

    loaded, loaded_frames = read_generation(written[-1])
    np.testing.assert_array_equal(loaded.tokens, generation.tokens)
    np.testing.assert_array_equal(loaded_frames, frames)
    np.testing.assert_array_equal(loaded.request.actor, actor)
    assert loaded.request.describe() == generation.request.describe()
    assert loaded.calls == generation.calls
    assert loaded.provenance == {"checkpoint_hash": "abc"}


def test_generation_io_errors(remflow_model, actor, tmp_path):
    generation = offline_generate(remflow_model, GenerationRequest(actor, [0, 1, 2]))
    with pytest.raises(ContractViolationError):
        write_generation(tmp_path / "gen", generation, np.zeros((3, 28, 4)), "parquet")
    with pytest.raises(MissingArtifactError):
        read_generation(tmp_path / "absent.npz")
    with pytest.raises(MissingArtifactError):
        read_generation(tmp_path / "absent.csv")
