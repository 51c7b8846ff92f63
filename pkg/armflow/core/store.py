"""Parameter storage and the checkpoint format shared by every model."""

import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterator, Mapping, Optional

import numpy as np

from ..autodiff import Value
from ..errors import FormatError, MissingArtifactError

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "armflow-checkpoint"
CHECKPOINT_VERSION = 1
MANIFEST_KEY = "__manifest__"


class ParameterStore(Mapping):
    """All learnable weights of one model, keyed by module path.

    Values handed out are gradient-tracking leaves. The trainer replaces them
    between steps with :meth:`assign`; nothing else mutates the store.
    """

    def __init__(self, arrays: Optional[Mapping[str, np.ndarray]] = None, trainable: bool = True):
        self._values: Dict[str, Value] = {}
        self.trainable = trainable
        for name, array in (arrays or {}).items():
            self.add(name, array)

    def __getitem__(self, name: str) -> Value:
        return self._values[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._values)

    def __len__(self) -> int:
        return len(self._values)

    def add(self, name: str, array: np.ndarray) -> Value:
        if name in self._values:
            raise KeyError(f"parameter '{name}' already exists")
        self._values[name] = Value(np.array(array, dtype=np.float64), requires_grad=self.trainable)
        return self._values[name]

    def assign(self, name: str, array: np.ndarray) -> None:
        current = self._values[name]
        if np.shape(array) != current.shape:
            raise FormatError(
                f"parameter '{name}' has shape {current.shape}, got {np.shape(array)}"
            )
        self._values[name] = Value(np.array(array, dtype=np.float64), requires_grad=self.trainable)

    def arrays(self) -> Dict[str, np.ndarray]:
        return {name: value.data for name, value in self._values.items()}

    def shapes(self) -> Dict[str, list]:
        return {name: list(value.shape) for name, value in self._values.items()}

    def frozen(self) -> "ParameterStore":
        """Copy whose leaves never request gradients (e.g. the VAE during flow training)."""
        return ParameterStore(self.arrays(), trainable=False)

    def fingerprint(self) -> str:
        """SHA-256 over sorted names, shapes and little-endian f64 bytes."""
        digest = hashlib.sha256()
        for name in sorted(self._values):
            data = self._values[name].data
            digest.update(name.encode())
            digest.update(json.dumps(list(data.shape)).encode())
            digest.update(np.ascontiguousarray(data, dtype="<f8").tobytes())
        return digest.hexdigest()

    def num_parameters(self) -> int:
        return int(sum(value.data.size for value in self._values.values()))


@dataclass
class Checkpoint:
    kind: str
    config: Dict[str, Any]
    params: ParameterStore
    extra: Dict[str, Any] = field(default_factory=dict)
    arrays: Dict[str, np.ndarray] = field(default_factory=dict)
    params_hash: str = ""


def atomic_write(path: Path, writer) -> None:
    """Run ``writer(tmp_path)`` then move the result into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    try:
        writer(tmp)
        os.replace(tmp, path)
    finally:
        if tmp.exists():
            tmp.unlink()


def save_checkpoint(
    path: Path,
    kind: str,
    config: Dict[str, Any],
    params: ParameterStore,
    extra: Optional[Dict[str, Any]] = None,
    arrays: Optional[Dict[str, np.ndarray]] = None,
) -> str:
    """Write a checkpoint atomically and return its parameter hash."""
    params_hash = params.fingerprint()
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "kind": kind,
        "config": config,
        "shapes": params.shapes(),
        "params_hash": params_hash,
        "extra": extra or {},
        "arrays": sorted((arrays or {}).keys()),
    }
    payload = {MANIFEST_KEY: np.frombuffer(json.dumps(manifest).encode(), dtype=np.uint8)}
    payload.update({f"param/{name}": data for name, data in params.arrays().items()})
    payload.update({name: np.asarray(data) for name, data in (arrays or {}).items()})

    def writer(tmp: Path) -> None:
        with open(tmp, "wb") as f:
            np.savez(f, **payload)

    atomic_write(Path(path), writer)
    logger.debug("saved %s checkpoint to %s (%s)", kind, path, params_hash[:12])
    return params_hash


def load_checkpoint(path: Path, kind: Optional[str] = None, trainable: bool = True) -> Checkpoint:
    """Read a checkpoint, validating format, version, kind and every shape."""
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"checkpoint not found: {path}")
    try:
        archive = np.load(path, allow_pickle=False)
    except (OSError, ValueError) as exc:
        raise FormatError(f"{path} is not a readable checkpoint: {exc}") from exc

    with archive:
        if MANIFEST_KEY not in archive.files:
            raise FormatError(f"{path} has no manifest")
        manifest = json.loads(archive[MANIFEST_KEY].tobytes().decode())
        if manifest.get("format") != CHECKPOINT_FORMAT:
            raise FormatError(f"{path} is not an armflow checkpoint")
        if manifest.get("version") != CHECKPOINT_VERSION:
            raise FormatError(
                f"{path} has checkpoint version {manifest.get('version')}, "
                f"expected {CHECKPOINT_VERSION}"
            )
        if kind is not None and manifest.get("kind") != kind:
            raise FormatError(f"{path} holds a '{manifest.get('kind')}' checkpoint, not '{kind}'")

        params = ParameterStore(trainable=trainable)
        for name, shape in manifest["shapes"].items():
            key = f"param/{name}"
            if key not in archive.files:
                raise FormatError(f"{path} is missing parameter '{name}'")
            data = archive[key]
            if list(data.shape) != list(shape):
                raise FormatError(
                    f"parameter '{name}' has shape {data.shape}, manifest says {shape}"
                )
            params.add(name, data)
        arrays = {name: archive[name] for name in manifest.get("arrays", [])}

    if params.fingerprint() != manifest["params_hash"]:
        raise FormatError(f"{path} parameter hash does not match its manifest")
    return Checkpoint(
        kind=manifest["kind"],
        config=manifest["config"],
        params=params,
        extra=manifest.get("extra", {}),
        arrays=arrays,
        params_hash=manifest["params_hash"],
    )


class CheckpointMixin:
    """``save``/``load`` for objects holding ``cfg`` (a dataclass) and ``params``."""

    KIND = ""
    CONFIG: Any = None

    def save(
        self,
        path: Path,
        extra: Optional[Dict[str, Any]] = None,
        arrays: Optional[Dict[str, np.ndarray]] = None,
    ) -> str:
        return save_checkpoint(path, self.KIND, asdict(self.cfg), self.params, extra, arrays)

    @classmethod
    def from_checkpoint(cls, checkpoint: Checkpoint):
        return cls(cls.CONFIG(**checkpoint.config), checkpoint.params)

    @classmethod
    def load(cls, path: Path, trainable: bool = False):
        return cls.from_checkpoint(load_checkpoint(path, kind=cls.KIND, trainable=trainable))
