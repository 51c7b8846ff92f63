"""Versioned binary container for toy datasets, plus a JSON-lines export.

Layout: a fixed little-endian header (magic, version, generation seed and
stream, split, counts, shapes and generation parameters) followed by the
label vector (int64) and the actor and reactor frames (float64).
"""

import json
import struct
from pathlib import Path

import numpy as np

from ..core.store import atomic_write
from ..errors import FormatError, MissingArtifactError
from .toy import SPLITS, ToyDataConfig, ToyDataset

MAGIC = b"ARMFDATA"
VERSION = 1
HEADER = struct.Struct("<8sHqIBIIIIIdddd")


def _pack_header(dataset: ToyDataset) -> bytes:
    n, length, channels = dataset.actor.shape
    cfg = dataset.cfg
    return HEADER.pack(
        MAGIC,
        VERSION,
        dataset.seed,
        dataset.stream,
        SPLITS.index(dataset.split),
        n,
        length,
        channels,
        cfg.n_labels,
        cfg.lag,
        cfg.fps,
        cfg.jitter,
        cfg.radius,
        cfg.distance,
    )


def save_dataset(dataset: ToyDataset, path: Path) -> None:
    payload = b"".join(
        [
            _pack_header(dataset),
            np.ascontiguousarray(dataset.labels, dtype="<i8").tobytes(),
            np.ascontiguousarray(dataset.actor, dtype="<f8").tobytes(),
            np.ascontiguousarray(dataset.reactor, dtype="<f8").tobytes(),
        ]
    )

    def writer(tmp: Path) -> None:
        tmp.write_bytes(payload)

    atomic_write(Path(path), writer)


def load_dataset(path: Path) -> ToyDataset:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"dataset not found: {path}")
    raw = path.read_bytes()
    if len(raw) < HEADER.size:
        raise FormatError(f"{path} is truncated ({len(raw)} bytes, header needs {HEADER.size})")
    (
        magic,
        version,
        seed,
        stream,
        split,
        n,
        length,
        channels,
        n_labels,
        lag,
        fps,
        jitter,
        radius,
        distance,
    ) = HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise FormatError(f"{path} is not an armflow dataset (magic {magic!r})")
    if version != VERSION:
        raise FormatError(f"{path} has dataset version {version}, expected {VERSION}")
    if split >= len(SPLITS):
        raise FormatError(f"{path} has unknown split code {split}")

    frames = n * length * channels
    expected = HEADER.size + 8 * n + 2 * 8 * frames
    if len(raw) != expected:
        raise FormatError(f"{path} holds {len(raw)} bytes, header implies {expected}")
    offset = HEADER.size
    labels = np.frombuffer(raw, dtype="<i8", count=n, offset=offset).astype(np.int64)
    offset += 8 * n
    actor = np.frombuffer(raw, dtype="<f8", count=frames, offset=offset)
    offset += 8 * frames
    reactor = np.frombuffer(raw, dtype="<f8", count=frames, offset=offset)

    try:
        cfg = ToyDataConfig(
            length=length,
            n_labels=n_labels,
            fps=fps,
            jitter=jitter,
            lag=lag,
            radius=radius,
            distance=distance,
        )
        return ToyDataset(
            actor.reshape(n, length, channels).astype(np.float64),
            reactor.reshape(n, length, channels).astype(np.float64),
            labels,
            cfg,
            seed,
            stream,
            SPLITS[split],
        )
    except ValueError as exc:
        raise FormatError(f"{path} holds an inconsistent dataset: {exc}") from exc


def export_jsonl(dataset: ToyDataset, path: Path) -> None:
    """One JSON object per pair, for eyeballing."""

    def writer(tmp: Path) -> None:
        with open(tmp, "w") as f:
            for i in range(len(dataset)):
                record = {
                    "index": i,
                    "split": dataset.split,
                    "label": int(dataset.labels[i]),
                    "actor": dataset.actor[i].round(6).tolist(),
                    "reactor": dataset.reactor[i].round(6).tolist(),
                }
                f.write(json.dumps(record) + "\n")

    atomic_write(Path(path), writer)
