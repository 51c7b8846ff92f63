"""Training run driver: iteration loop, loss log, checkpoints and resume."""

import csv
import json
import logging
import time
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional

import numpy as np

from ..core.store import CheckpointMixin, atomic_write, load_checkpoint
from ..data.tokens import TokenizedDataset
from ..data.toy import ToyDataset
from ..errors import ContractViolationError, MissingArtifactError
from ..nn.models import ARMFlow, ReMFlow, ToyVelocityField
from ..nn.vae import MotionVAE
from .offline import remflow_train_step, toy_train_step, vae_train_step
from .online import bsce_train_step, gte_train_step, rollout_train_step
from .optim import AdamState, StepResult, TrainConfig
from .schedule import BsceSchedule, mix_fraction

logger = logging.getLogger(__name__)

STRATEGIES = ("bsce", "gte", "rollout")
LOG_COLUMNS = ("iteration", "K", "loss", "wall_ms")

StepFn = Callable[[int, np.random.Generator, AdamState], StepResult]


class TrainingRun:
    """Owns one model's optimizer state and RNG across iterations.

    Output directory layout::

        manifest.json     run description, updated at every checkpoint
        losses.csv        iteration,K,loss,wall_ms
        checkpoint.npz    latest parameters, Adam moments and RNG state
    """

    MANIFEST_FILE = "manifest.json"
    LOG_FILE = "losses.csv"
    CHECKPOINT_FILE = "checkpoint.npz"

    def __init__(
        self,
        out_dir: Path,
        model: CheckpointMixin,
        cfg: TrainConfig,
        step_fn: StepFn,
        info: Optional[Dict[str, Any]] = None,
    ):
        self.out_dir = Path(out_dir)
        self.model = model
        self.cfg = cfg
        self.step_fn = step_fn
        self.info = info or {}
        self.state = AdamState()
        self.rng = np.random.default_rng(cfg.seed)
        self.iteration = 0
        self.losses: List[float] = []

    @property
    def checkpoint_path(self) -> Path:
        return self.out_dir / self.CHECKPOINT_FILE

    @property
    def log_path(self) -> Path:
        return self.out_dir / self.LOG_FILE

    def resume(self) -> bool:
        """Restore from the last checkpoint if one exists; returns whether it did."""
        if not self.checkpoint_path.exists():
            return False
        checkpoint = load_checkpoint(self.checkpoint_path, kind=self.model.KIND)
        for name, array in checkpoint.params.arrays().items():
            self.model.params.assign(name, array)
        extra = checkpoint.extra
        self.iteration = int(extra["iteration"])
        self.state = AdamState.from_arrays(int(extra["adam_step"]), checkpoint.arrays)
        self.rng.bit_generator.state = extra["rng_state"]
        self.losses = [float(x) for x in extra.get("loss_tail", [])]
        self._truncate_log()
        logger.info("resumed %s run at iteration %d", self.model.KIND, self.iteration)
        return True

    def _truncate_log(self) -> None:
        """Drop log rows written after the checkpoint we resumed from."""
        if not self.log_path.exists():
            return
        with open(self.log_path, newline="") as f:
            rows = [row for row in csv.DictReader(f) if int(row["iteration"]) < self.iteration]
        self._write_log(rows)

    def _write_log(self, rows: List[Dict[str, Any]]) -> None:
        def writer(tmp: Path) -> None:
            with open(tmp, "w", newline="") as f:
                out = csv.DictWriter(f, fieldnames=LOG_COLUMNS)
                out.writeheader()
                out.writerows(rows)

        atomic_write(self.log_path, writer)

    def _append_log(self, row: Dict[str, Any]) -> None:
        with open(self.log_path, "a", newline="") as f:
            csv.DictWriter(f, fieldnames=LOG_COLUMNS).writerow(row)

    def checkpoint(self) -> str:
        extra = {
            "iteration": self.iteration,
            "adam_step": self.state.step,
            "rng_state": self.rng.bit_generator.state,
            "loss_tail": self.losses[-50:],
        }
        params_hash = self.model.save(self.checkpoint_path, extra, self.state.to_arrays())
        self._write_manifest(params_hash)
        return params_hash

    def _write_manifest(self, params_hash: str) -> None:
        manifest = {
            "kind": self.model.KIND,
            "seed": self.cfg.seed,
            "iteration": self.iteration,
            "max_iterations": self.cfg.max_iterations,
            "params_hash": params_hash,
            "num_parameters": self.model.params.num_parameters(),
            "log": self.LOG_FILE,
            "checkpoint": self.CHECKPOINT_FILE,
            **self.info,
        }

        def writer(tmp: Path) -> None:
            with open(tmp, "w") as f:
                json.dump(manifest, f, indent=2)

        atomic_write(self.out_dir / self.MANIFEST_FILE, writer)

    def run(self, on_step: Optional[Callable[[int, StepResult], None]] = None) -> str:
        """Train to ``max_iterations`` and return the final parameter hash."""
        self.out_dir.mkdir(parents=True, exist_ok=True)
        if self.iteration == 0:
            self._write_log([])
        every = max(self.cfg.checkpoint_every, 1)
        params_hash = ""
        while self.iteration < self.cfg.max_iterations:
            start = time.perf_counter()
            result = self.step_fn(self.iteration, self.rng, self.state)
            wall_ms = (time.perf_counter() - start) * 1000.0
            self._append_log(
                {
                    "iteration": self.iteration,
                    "K": result.k,
                    "loss": repr(result.loss),
                    "wall_ms": f"{wall_ms:.3f}",
                }
            )
            self.losses.append(result.loss)
            self.iteration += 1
            if on_step is not None:
                on_step(self.iteration, result)
            if self.iteration % every == 0 or self.iteration == self.cfg.max_iterations:
                params_hash = self.checkpoint()
        if not params_hash:
            params_hash = self.checkpoint()
        return params_hash


def online_step_fn(
    model: ARMFlow,
    data: TokenizedDataset,
    cfg: TrainConfig,
    strategy: str,
    schedule: BsceSchedule,
    mix_ramp_fraction: float = 0.5,
    max_position: Optional[int] = None,
) -> StepFn:
    if strategy not in STRATEGIES:
        raise ContractViolationError(f"unknown strategy '{strategy}' (choose from {STRATEGIES})")

    def step(iteration: int, rng: np.random.Generator, state: AdamState) -> StepResult:
        batch = data.sample_batch(rng, cfg.batch_size)
        if strategy == "bsce":
            return bsce_train_step(model, batch, state, cfg, rng, schedule, iteration)
        if strategy == "gte":
            return gte_train_step(model, batch, state, cfg, rng, iteration, max_position)
        mix = mix_fraction(iteration, cfg.max_iterations, mix_ramp_fraction)
        return rollout_train_step(model, batch, state, cfg, rng, iteration, mix, max_position)

    return step


def offline_step_fn(model: ReMFlow, data: TokenizedDataset, cfg: TrainConfig) -> StepFn:
    def step(iteration: int, rng: np.random.Generator, state: AdamState) -> StepResult:
        return remflow_train_step(model, data.sample_batch(rng, cfg.batch_size), state, cfg, rng)

    return step


def toy_step_fn(model: ToyVelocityField, distribution: Any, cfg: TrainConfig) -> StepFn:
    """``distribution`` is anything with ``sample(n, rng)``."""

    def step(iteration: int, rng: np.random.Generator, state: AdamState) -> StepResult:
        return toy_train_step(model, distribution.sample(cfg.batch_size, rng), state, cfg, rng)

    return step


def vae_step_fn(vae: MotionVAE, dataset: ToyDataset, cfg: TrainConfig) -> StepFn:
    """Batches mix actor and reactor sequences with their role ids."""

    def step(iteration: int, rng: np.random.Generator, state: AdamState) -> StepResult:
        index = rng.choice(len(dataset), size=min(cfg.batch_size, len(dataset)), replace=False)
        roles = rng.integers(0, 2, size=index.shape[0])
        frames = np.where(roles[:, None, None] == 0, dataset.actor[index], dataset.reactor[index])
        return vae_train_step(vae, frames, roles, state, cfg, rng)

    return step


def require_checkpoint(path: Path, what: str) -> Path:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"{what} checkpoint not found: {path}")
    return path
