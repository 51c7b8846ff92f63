"""armflow CLI - reaction generation with one-step MeanFlow models."""

import csv
import functools
from dataclasses import replace
from pathlib import Path
from typing import Callable, Optional, Tuple

import click
import numpy as np
from rich.progress import BarColumn, Progress, TextColumn, TimeElapsedColumn
from rich.table import Table

from .core.config import PRESETS, Config
from .core.console import console, setup_logging
from .data.container import export_jsonl, load_dataset, save_dataset
from .data.tokens import TokenizedDataset, tokenize
from .data.toy import ToyDataset, analytic_responses, make_splits
from .errors import ArmflowError, FormatError, MissingArtifactError
from .eval.embedder import FeatureEmbedder, train_embedder
from .eval.metrics import MetricReport, evaluate_generations
from .flow.field import OBJECTIVES
from .nn.models import ARMFlow, ReMFlow
from .nn.vae import MotionVAE
from .sampler.generate import (
    GenerationRequest,
    decode_generation,
    offline_generate,
    online_generate_request,
    read_generation,
    write_generation,
)
from .train.runner import (
    STRATEGIES,
    TrainingRun,
    offline_step_fn,
    online_step_fn,
    require_checkpoint,
    vae_step_fn,
)

TRAIN_FILE = "train.bin"
TEST_FILE = "test.bin"


def handle_errors(func: Callable) -> Callable:
    """Report armflow errors as one-line click errors (exit code 1)."""

    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except ArmflowError as exc:
            raise click.ClickException(str(exc)) from exc

    return wrapper


def run_options(func: Callable) -> Callable:
    options = [
        click.option(
            "--config", "config_path", type=click.Path(dir_okay=False), help="YAML config file"
        ),
        click.option("--seed", type=int, default=None, help="Override the config seed"),
        click.option("--preset", type=click.Choice(sorted(PRESETS)), default=None),
        click.option(
            "--out", type=click.Path(file_okay=False), required=True, help="Output directory"
        ),
        click.option("--set", "overrides", multiple=True, help="section.key=value override"),
        click.option("--verbose", "-v", is_flag=True, help="Debug logging"),
    ]
    for option in reversed(options):
        func = option(func)
    return func


def _prepare(config_path, preset, seed, overrides, out, verbose) -> Tuple[Config, Path]:
    """Resolve the config and snapshot it into ``out`` before any work."""
    setup_logging(verbose)
    config = Config.load(config_path, preset, overrides, seed)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    config.save(out / "run_config.yml")
    return config, out


def _progress() -> Progress:
    return Progress(
        TextColumn("[cyan]{task.description}"),
        BarColumn(),
        TextColumn("{task.completed}/{task.total}"),
        TextColumn("loss {task.fields[loss]}"),
        TimeElapsedColumn(),
        console=console,
    )


def _train(run: TrainingRun, description: str) -> str:
    with _progress() as progress:
        task = progress.add_task(
            description, total=run.cfg.max_iterations, completed=run.iteration, loss="-"
        )

        def on_step(iteration, result):
            progress.update(task, completed=iteration, loss=f"{result.loss:.4f}")

        return run.run(on_step)


def _make_data(
    config: Config, data_dir: Path, jsonl: bool = False
) -> Tuple[ToyDataset, ToyDataset]:
    d = config.data
    train, test = make_splits(
        int(d["n_train"]), int(d["n_test"]), config.toy_data_config(), config.seed
    )
    save_dataset(train, data_dir / TRAIN_FILE)
    save_dataset(test, data_dir / TEST_FILE)
    if jsonl:
        export_jsonl(train, data_dir / "train.jsonl")
        export_jsonl(test, data_dir / "test.jsonl")
    return train, test


def _load_data(
    config: Config, data_dir: Path, generate: bool = False
) -> Tuple[ToyDataset, ToyDataset]:
    data_dir = Path(data_dir)
    if not (data_dir / TRAIN_FILE).exists() or not (data_dir / TEST_FILE).exists():
        if not generate:
            raise MissingArtifactError(
                f"no dataset in {data_dir}; run make-data or pass --generate"
            )
        console.print(f"[yellow]Generating dataset in {data_dir}[/yellow]")
        return _make_data(config, data_dir)
    return load_dataset(data_dir / TRAIN_FILE), load_dataset(data_dir / TEST_FILE)


def _load_vae(path: str) -> MotionVAE:
    return MotionVAE.load(require_checkpoint(Path(path), "VAE"))


def _embedder(
    config: Config, out: Path, train: ToyDataset, test: ToyDataset, path: Optional[str]
) -> FeatureEmbedder:
    if path:
        return FeatureEmbedder.load(require_checkpoint(Path(path), "embedder"))
    e = config.eval
    console.print("[cyan]Training the evaluation embedder[/cyan]")
    embedder, accuracy = train_embedder(
        config.embedder_config(),
        train,
        test,
        iterations=int(e["embedder_iterations"]),
        lr=float(e["embedder_lr"]),
        batch_size=int(e["embedder_batch_size"]),
        seed=config.seed,
        gate=float(e["gate"]),
        enforce_gate=bool(e["enforce_gate"]),
    )
    embedder.save(out / "embedder.npz", extra={"accuracy": accuracy})
    console.print(f"Embedder accuracy {accuracy:.3f}, checksum {embedder.checksum[:12]}")
    return embedder


def _evaluate(
    config: Config,
    embedder: FeatureEmbedder,
    test: ToyDataset,
    generated: np.ndarray,
    labels: np.ndarray,
    meta: dict,
    repeats: Optional[np.ndarray] = None,
) -> MetricReport:
    n = generated.shape[0]
    if not np.array_equal(labels, test.labels[:n]):
        raise FormatError("generation labels do not match the test split")
    e = config.eval
    actor = test.actor[:n]
    return evaluate_generations(
        embedder,
        actor,
        generated,
        test.reactor[:n],
        labels,
        analytic_responses(actor, labels, test.cfg),
        pool_size=int(e["pool_size"]),
        top_k=int(e["top_k"]),
        diversity_pairs=int(e["diversity_pairs"]),
        drift_buckets=int(e["drift_buckets"]),
        frames_per_token=2 ** int(config.vae["n_down_blocks"]),
        seed=config.seed,
        meta={"dataset_seed": test.seed, "dataset_hash": test.hash(), **meta},
        repeats=repeats,
    )


def _report_table(title: str, report: MetricReport) -> Table:
    table = Table(title=title)
    table.add_column("Metric", style="cyan")
    table.add_column("Value", style="white")
    for name, value in report.to_row().items():
        table.add_row(name, f"{value:.4f}")
    return table


@click.group()
@click.version_option()
def main():
    """armflow - online and offline reaction generation with one-step flows."""
    pass


@main.command("make-data")
@run_options
@click.option("--jsonl", is_flag=True, help="Also write JSON-lines exports")
@handle_errors
def make_data(config_path, seed, preset, out, overrides, verbose, jsonl):
    """Generate the train/test toy interaction datasets."""
    config, out = _prepare(config_path, preset, seed, overrides, out, verbose)
    train, test = _make_data(config, out, jsonl)

    table = Table(title="Toy datasets")
    table.add_column("Split", style="cyan")
    table.add_column("Pairs", style="yellow")
    table.add_column("Hash", style="dim")
    for dataset in (train, test):
        table.add_row(dataset.split, str(len(dataset)), dataset.hash()[:16])
    console.print(table)


@main.command("train-vae")
@run_options
@click.option("--data", "data_dir", type=click.Path(file_okay=False), required=True)
@click.option("--generate", is_flag=True, help="Create the dataset first if it is missing")
@click.option("--resume", is_flag=True, help="Continue from the last checkpoint in --out")
@handle_errors
def train_vae(config_path, seed, preset, out, overrides, verbose, data_dir, generate, resume):
    """Train the motion VAE that turns frames into tokens."""
    config, out = _prepare(config_path, preset, seed, overrides, out, verbose)
    train, _ = _load_data(config, Path(data_dir), generate)
    vae = MotionVAE.init(config.vae_config(), config.seed)
    cfg = config.vae_train_config()
    run = TrainingRun(out, vae, cfg, vae_step_fn(vae, train, cfg), {"dataset_hash": train.hash()})
    if resume:
        run.resume()
    params_hash = _train(run, "VAE")
    console.print(f"[green]VAE checkpoint[/green] {run.checkpoint_path} ({params_hash[:16]})")


@main.command()
@run_options
@click.option("--mode", type=click.Choice(["online", "offline"]), default="online")
@click.option("--strategy", type=click.Choice(STRATEGIES), default="bsce")
@click.option("--objective", type=click.Choice(OBJECTIVES), default=None)
@click.option("--vae", "vae_path", type=click.Path(dir_okay=False), required=True)
@click.option("--data", "data_dir", type=click.Path(file_okay=False), required=True)
@click.option("--resume", is_flag=True, help="Continue from the last checkpoint in --out")
@handle_errors
def train(
    config_path, seed, preset, out, overrides, verbose,
    mode, strategy, objective, vae_path, data_dir, resume,
):
    """Train ARMFlow (online) or ReMFlow (offline) on VAE tokens."""
    config, out = _prepare(config_path, preset, seed, overrides, out, verbose)
    vae = _load_vae(vae_path)
    train_set, _ = _load_data(config, Path(data_dir))
    tokens = TokenizedDataset.from_frames(vae, train_set.actor, train_set.reactor, train_set.labels)

    cfg = config.train_config(mode)
    if objective:
        cfg = replace(cfg, objective=objective)
    info = {
        "mode": mode,
        "objective": cfg.objective,
        "vae_hash": vae.params.fingerprint(),
        "dataset_hash": train_set.hash(),
    }
    if mode == "online":
        model = ARMFlow.init(config.model_config(), config.seed)
        b = config.bsce
        step = online_step_fn(
            model, tokens, cfg, strategy, config.schedule(), float(b["mix_ramp_fraction"]),
            b["max_position"],
        )
        info["strategy"] = strategy
    else:
        model = ReMFlow.init(config.model_config(), config.seed)
        step = offline_step_fn(model, tokens, cfg)

    run = TrainingRun(out, model, cfg, step, info)
    if resume:
        run.resume()
    params_hash = _train(run, f"{mode} {strategy if mode == 'online' else ''}".strip())
    console.print(f"[green]Checkpoint[/green] {run.checkpoint_path} ({params_hash[:16]})")


def _generate(
    config: Config, mode: str, model, vae: MotionVAE, test: ToyDataset, n: int, objective: str
):
    actor_tokens, _ = tokenize(vae, test.actor[:n], test.reactor[:n])
    request = GenerationRequest(
        actor_tokens,
        test.labels[:n],
        seed=config.seed,
        mode=mode,
        objective=objective,
        euler_steps=int(config.train["euler_steps"]),
    )
    sample_fn = online_generate_request if mode == "online" else offline_generate
    generation = sample_fn(model, request)
    generation.provenance = {
        "checkpoint_hash": model.params.fingerprint(),
        "vae_hash": vae.params.fingerprint(),
    }
    frames = decode_generation(vae, generation.tokens, test.cfg.length)
    # repeats reuse the request under later seeds; calls and latency stay the first run's
    repeats = []
    for j in range(1, int(config.eval["mmodality_repeats"])):
        again = sample_fn(model, replace(request, seed=config.seed + j))
        repeats.append(decode_generation(vae, again.tokens, test.cfg.length))
    generation.repeats = np.stack(repeats) if repeats else None
    return generation, frames


@main.command()
@run_options
@click.option("--mode", type=click.Choice(["online", "offline"]), default="online")
@click.option("--model", "model_path", type=click.Path(dir_okay=False), required=True)
@click.option("--vae", "vae_path", type=click.Path(dir_okay=False), required=True)
@click.option("--data", "data_dir", type=click.Path(file_okay=False), required=True)
@click.option("--n", "n_samples", type=int, default=None, help="Number of test actors")
@click.option("--format", "fmt", type=click.Choice(["npz", "csv"]), default=None)
@handle_errors
def sample(
    config_path, seed, preset, out, overrides, verbose,
    mode, model_path, vae_path, data_dir, n_samples, fmt,
):
    """Generate reactor motions for the first N test actors."""
    config, out = _prepare(config_path, preset, seed, overrides, out, verbose)
    vae = _load_vae(vae_path)
    _, test = _load_data(config, Path(data_dir))
    model_cls = ARMFlow if mode == "online" else ReMFlow
    model = model_cls.load(require_checkpoint(Path(model_path), f"{mode} model"))
    n = min(n_samples or int(config.sample["n"]), len(test))

    generation, frames = _generate(
        config, mode, model, vae, test, n, config.train["objective"]
    )
    written = write_generation(
        out / "generation", generation, frames, fmt or config.sample["format"]
    )
    for path in written:
        console.print(f"[green]Wrote[/green] {path}")
    calls = ", ".join(f"{k}={v}" for k, v in sorted(generation.calls.items()))
    console.print(f"Model calls: {calls}")
    if generation.token_us:
        console.print(
            f"Per-token latency: {np.mean(generation.token_us):.1f} µs "
            f"(max {np.max(generation.token_us):.1f} µs)"
        )


@main.command("eval")
@run_options
@click.option("--data", "data_dir", type=click.Path(file_okay=False), required=True)
@click.option("--generation", "generation_path", type=click.Path(dir_okay=False), default=None)
@click.option("--ground-truth", is_flag=True, help="Score the test reactors themselves")
@click.option("--embedder", "embedder_path", type=click.Path(dir_okay=False), default=None)
@handle_errors
def evaluate(
    config_path, seed, preset, out, overrides, verbose,
    data_dir, generation_path, ground_truth, embedder_path,
):
    """Compute the metric report for a generation file."""
    config, out = _prepare(config_path, preset, seed, overrides, out, verbose)
    train_set, test = _load_data(config, Path(data_dir))
    if ground_truth:
        n = min(int(config.sample["n"]), len(test))
        frames, labels, meta = test.reactor[:n], test.labels[:n], {"source": "ground-truth"}
        repeats = None
    elif generation_path:
        generation, frames = read_generation(Path(generation_path))
        labels = generation.request.labels
        repeats = generation.repeats
        meta = {
            "source": str(generation_path),
            **generation.request.describe(),
            **generation.provenance,
        }
    else:
        raise click.UsageError("pass --generation PATH or --ground-truth")

    embedder = _embedder(config, out, train_set, test, embedder_path)
    report = _evaluate(config, embedder, test, frames, labels, meta, repeats)
    report.write_json(out / "metrics.json")
    console.print(_report_table("Metrics", report))


@main.command()
@run_options
@click.option("--vae", "vae_path", type=click.Path(dir_okay=False), required=True)
@click.option("--data", "data_dir", type=click.Path(file_okay=False), required=True)
@click.option("--embedder", "embedder_path", type=click.Path(dir_okay=False), default=None)
@handle_errors
def ablate(config_path, seed, preset, out, overrides, verbose, vae_path, data_dir, embedder_path):
    """Objective x strategy sweep for the online model, one CSV row per cell."""
    config, out = _prepare(config_path, preset, seed, overrides, out, verbose)
    vae = _load_vae(vae_path)
    train_set, test = _load_data(config, Path(data_dir))
    tokens = TokenizedDataset.from_frames(vae, train_set.actor, train_set.reactor, train_set.labels)
    embedder = _embedder(config, out, train_set, test, embedder_path)
    n = min(int(config.sample["n"]), len(test))
    base = replace(
        config.train_config("online"), max_iterations=int(config.eval["ablation_iterations"])
    )
    b = config.bsce

    rows = []
    for objective in OBJECTIVES:
        for strategy in STRATEGIES:
            cfg = replace(base, objective=objective)
            model = ARMFlow.init(config.model_config(), config.seed)
            step = online_step_fn(
                model, tokens, cfg, strategy, config.schedule(), float(b["mix_ramp_fraction"]),
                b["max_position"],
            )
            run = TrainingRun(
                out / f"{objective}-{strategy}", model, cfg, step,
                {"objective": objective, "strategy": strategy},
            )
            _train(run, f"{objective}/{strategy}")
            generation, frames = _generate(config, "online", model, vae, test, n, objective)
            report = _evaluate(
                config, embedder, test, frames, test.labels[:n],
                {"objective": objective, "strategy": strategy, **generation.provenance},
                generation.repeats,
            )
            report.write_json(out / f"{objective}-{strategy}" / "metrics.json")
            calls_per_token = sum(generation.calls.values()) / generation.tokens.shape[1]
            rows.append(
                {
                    "objective": objective,
                    "strategy": strategy,
                    **report.to_row(),
                    "calls_per_token": calls_per_token,
                    "token_us": float(np.mean(generation.token_us)),
                }
            )

    with open(out / "ablation.csv", "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)

    table = Table(title="Ablation")
    for column in rows[0]:
        table.add_column(column, style="cyan" if column in ("objective", "strategy") else "white")
    for row in rows:
        table.add_row(
            *(v if isinstance(v, str) else f"{v:.4f}" for v in row.values())
        )
    console.print(table)


if __name__ == "__main__":
    main()
