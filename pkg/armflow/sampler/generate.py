"""Offline single-pass and online token-by-token reactor generation.

Noise comes from a counter-based Philox generator keyed by the request
seed and is consumed one token at a time, so the offline pass, the online
stream and the full-recompute replay all see the same draws.
"""

import csv
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, Iterator, List, Optional, Tuple

import numpy as np

from ..autodiff import no_grad
from ..core.store import atomic_write
from ..data.tokens import detokenize
from ..errors import CapacityError, ContractViolationError, FormatError, MissingArtifactError
from ..flow.field import sample_tokens
from ..nn.cache import ContextBuffer
from ..nn.models import ARMFlow, Condition, PredictorCondition, ReMFlow
from ..nn.vae import MotionVAE

logger = logging.getLogger(__name__)

MODES = ("offline", "online")
FRAME_COLUMNS = ("sample", "frame", "x", "y", "vx", "vy")


@dataclass
class GenerationRequest:
    actor: np.ndarray
    labels: np.ndarray
    seed: int = 0
    mode: str = "offline"
    objective: str = "meanflow"
    euler_steps: int = 10

    def __post_init__(self):
        self.actor = np.asarray(self.actor, dtype=np.float64)
        self.labels = np.atleast_1d(np.asarray(self.labels, dtype=np.int64))
        if self.actor.ndim != 3:
            raise ContractViolationError(f"actor tokens must be (B, N, L), got {self.actor.shape}")
        if self.labels.shape != (self.actor.shape[0],):
            raise ContractViolationError(
                f"expected {self.actor.shape[0]} labels, got {self.labels.shape}"
            )
        if self.mode not in MODES:
            raise ContractViolationError(f"unknown mode '{self.mode}' (choose from {MODES})")

    def describe(self) -> Dict[str, object]:
        return {
            "mode": self.mode,
            "seed": self.seed,
            "objective": self.objective,
            "euler_steps": self.euler_steps,
            "batch": int(self.actor.shape[0]),
            "n_tokens": int(self.actor.shape[1]),
            "labels": self.labels.tolist(),
        }


@dataclass
class OnlineTrace:
    token_us: List[float] = field(default_factory=list)

    @property
    def mean_us(self) -> float:
        return float(np.mean(self.token_us)) if self.token_us else 0.0


@dataclass
class Generation:
    request: GenerationRequest
    tokens: np.ndarray
    calls: Dict[str, int]
    token_us: List[float] = field(default_factory=list)
    provenance: Dict[str, str] = field(default_factory=dict)
    # decoded frames of further seeded runs of the same request, (R, B, T, C)
    repeats: Optional[np.ndarray] = None


def noise_generator(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(seed))


def token_noise(rng: np.random.Generator, batch: int, n_tokens: int, dim: int) -> np.ndarray:
    """(B, N, L) noise drawn token by token."""
    return np.stack([rng.standard_normal((batch, dim)) for _ in range(n_tokens)], axis=1)


def offline_generate(model: ReMFlow, request: GenerationRequest) -> Generation:
    """All reactor tokens in one pass at (r, t) = (0, 1).

    Guidance is trained in, so no unconditional pass runs.
    """
    if request.mode != "offline":
        raise ContractViolationError("offline_generate needs an offline request")
    batch, n_tokens, dim = request.actor.shape
    if dim != model.cfg.token_dim:
        raise ContractViolationError(
            f"actor tokens have dim {dim}, model expects {model.cfg.token_dim}"
        )
    eps = token_noise(noise_generator(request.seed), batch, n_tokens, dim)
    before = dict(model.calls)
    cond = Condition(request.labels, actor=request.actor)
    tokens = sample_tokens(model, eps, cond, request.objective, request.euler_steps)
    calls = {k: model.calls[k] - before.get(k, 0) for k in model.calls}
    return Generation(request, tokens, calls)


def online_generate(
    model: ARMFlow,
    actor_stream: Iterable[np.ndarray],
    cond: Condition,
    rng: np.random.Generator,
    objective: str = "meanflow",
    euler_steps: int = 10,
    trace: Optional[OnlineTrace] = None,
) -> Iterator[np.ndarray]:
    """Yield one (B, L) reactor token per incoming (B, L) actor token.

    Each token costs one predictor call and one incremental encoder step;
    the token is emitted after its pair has entered the cache.
    """
    cfg = model.cfg
    cache, context = model.encoder.start(cond)
    buffer: Optional[ContextBuffer] = None
    for i, actor in enumerate(actor_stream):
        if i >= cfg.max_tokens:
            raise CapacityError(f"actor stream exceeds max_tokens ({cfg.max_tokens})")
        start = time.perf_counter()
        actor = np.asarray(actor, dtype=np.float64)
        if buffer is None:
            buffer = ContextBuffer(actor.shape[0], actor.shape[1], cfg.max_tokens)
        eps = rng.standard_normal(actor.shape)
        with no_grad():
            reactor = sample_tokens(
                model.predictor,
                eps,
                PredictorCondition.build(context, actor),
                objective,
                euler_steps,
            )
        context = model.encoder.update(buffer, actor, reactor, cache)
        if trace is not None:
            trace.token_us.append((time.perf_counter() - start) * 1e6)
        yield reactor


def online_generate_request(model: ARMFlow, request: GenerationRequest) -> Generation:
    if request.mode != "online":
        raise ContractViolationError("online_generate_request needs an online request")
    trace = OnlineTrace()
    before = dict(model.calls)
    stream = (request.actor[:, i] for i in range(request.actor.shape[1]))
    tokens = list(
        online_generate(
            model,
            stream,
            Condition(request.labels),
            noise_generator(request.seed),
            request.objective,
            request.euler_steps,
            trace,
        )
    )
    calls = {k: model.calls[k] - before.get(k, 0) for k in model.calls}
    return Generation(request, np.stack(tokens, axis=1), calls, trace.token_us)


def replay_generate(
    model: ARMFlow,
    actor: np.ndarray,
    cond: Condition,
    rng: np.random.Generator,
    objective: str = "meanflow",
    euler_steps: int = 10,
) -> np.ndarray:
    """Reference rollout that re-encodes the whole history before every token."""
    actor = np.asarray(actor, dtype=np.float64)
    batch, n_tokens, dim = actor.shape
    reactor = np.zeros_like(actor)
    with no_grad():
        for i in range(n_tokens):
            buffer = ContextBuffer.from_tokens(actor[:, :i], reactor[:, :i], model.cfg.max_tokens)
            context = model.encoder.encode(buffer, cond).data[:, -1]
            eps = rng.standard_normal((batch, dim))
            reactor[:, i] = sample_tokens(
                model.predictor,
                eps,
                PredictorCondition.build(context, actor[:, i]),
                objective,
                euler_steps,
            )
    return reactor


def decode_generation(
    vae: MotionVAE, tokens: np.ndarray, length: Optional[int] = None
) -> np.ndarray:
    """Reactor frames (B, length, channels) for generated tokens."""
    tokens = np.asarray(tokens, dtype=np.float64)
    if tokens.ndim == 2:
        tokens = tokens[None]
    return detokenize(vae, tokens, "reactor", length)


def write_generation(
    path: Path, generation: Generation, frames: np.ndarray, fmt: str = "npz"
) -> List[Path]:
    """Write the generation record; returns the files written.

    ``npz`` stores everything in one archive. ``csv`` writes the frames as
    rows plus a JSON sidecar with the request, tokens, latencies and any
    repeat frames.
    """
    path = Path(path)
    meta = {
        "request": generation.request.describe(),
        "calls": generation.calls,
        "token_us": generation.token_us,
        "provenance": generation.provenance,
    }
    if fmt == "npz":
        target = path.with_suffix(".npz")

        def write_npz(tmp: Path) -> None:
            extra = {} if generation.repeats is None else {"repeats": generation.repeats}
            with open(tmp, "wb") as f:
                np.savez(
                    f,
                    meta=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8),
                    tokens=generation.tokens,
                    frames=frames,
                    actor=generation.request.actor,
                    labels=generation.request.labels,
                    token_us=np.asarray(generation.token_us, dtype=np.float64),
                    **extra,
                )

        atomic_write(target, write_npz)
        return [target]
    if fmt != "csv":
        raise ContractViolationError(f"unknown generation format '{fmt}' (npz or csv)")

    sidecar = path.with_suffix(".json")
    table = path.with_suffix(".csv")
    meta["tokens"] = generation.tokens.tolist()
    meta["actor"] = generation.request.actor.tolist()
    if generation.repeats is not None:
        meta["repeats"] = np.asarray(generation.repeats).tolist()

    def write_json(tmp: Path) -> None:
        with open(tmp, "w") as f:
            json.dump(meta, f)

    def write_csv(tmp: Path) -> None:
        with open(tmp, "w", newline="") as f:
            out = csv.writer(f)
            out.writerow(FRAME_COLUMNS)
            for s, sample in enumerate(frames):
                for t, row in enumerate(sample):
                    out.writerow([s, t, *(repr(float(v)) for v in row)])

    atomic_write(sidecar, write_json)
    atomic_write(table, write_csv)
    return [sidecar, table]


def read_generation(path: Path) -> Tuple[Generation, np.ndarray]:
    """Load what :func:`write_generation` wrote (either format)."""
    path = Path(path)
    if path.suffix == ".npz":
        if not path.exists():
            raise MissingArtifactError(f"generation file not found: {path}")
        with np.load(path, allow_pickle=False) as archive:
            meta = json.loads(archive["meta"].tobytes().decode())
            tokens, frames = archive["tokens"], archive["frames"]
            actor, labels = archive["actor"], archive["labels"]
            repeats = archive["repeats"] if "repeats" in archive.files else None
    else:
        sidecar, table = path.with_suffix(".json"), path.with_suffix(".csv")
        if not (sidecar.exists() and table.exists()):
            raise MissingArtifactError(f"generation files not found: {sidecar}, {table}")
        with open(sidecar) as f:
            meta = json.load(f)
        tokens, actor = np.asarray(meta["tokens"]), np.asarray(meta["actor"])
        labels = np.asarray(meta["request"]["labels"])
        repeats = np.asarray(meta["repeats"]) if "repeats" in meta else None
        with open(table, newline="") as f:
            rows = [[float(v) for v in row[2:]] for row in list(csv.reader(f))[1:]]
        frames = np.asarray(rows).reshape(tokens.shape[0], -1, len(FRAME_COLUMNS) - 2)
    request_meta = meta["request"]
    try:
        request = GenerationRequest(
            actor,
            labels,
            request_meta["seed"],
            request_meta["mode"],
            request_meta["objective"],
            request_meta["euler_steps"],
        )
    except (KeyError, ContractViolationError) as exc:
        raise FormatError(f"{path} holds an unreadable generation record: {exc}") from exc
    provenance = meta.get("provenance", {})
    generation = Generation(request, tokens, meta["calls"], meta["token_us"], provenance, repeats)
    return generation, frames

