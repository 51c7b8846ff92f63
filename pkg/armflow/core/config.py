"""Configuration management for armflow."""

import copy
from pathlib import Path
from typing import Any, Dict, Iterable, Optional

import yaml

from ..errors import ConfigError

DEFAULT_CONFIG: Dict[str, Any] = {
    "version": 1,
    "seed": 0,
    "preset": "desk",
    "data": {
        "n_train": 5000,
        "n_test": 500,
        "length": 64,
        "n_labels": 3,
        "fps": 20.0,
        "jitter": 0.01,
        "lag": 4,
        "radius": 1.0,
        "distance": 0.8,
    },
    "vae": {
        "latent": 8,
        "hidden": 64,
        "n_down_blocks": 2,
        "layers_per_block": 2,
        "kl_weight": 1e-4,
        "vel_weight": 0.5,
        "lr": 1e-3,
        "batch_size": 32,
        "iterations": 2000,
        "checkpoint_every": 500,
    },
    "model": {
        "hidden": 128,
        "n_layers": 4,
        "n_heads": 4,
        "mlp_layers": 3,
        "use_skip": True,
        "use_pos_enc": True,
        "max_tokens": 64,
    },
    "train": {
        "lr": 1e-3,
        "betas": [0.9, 0.999],
        "eps": 1e-8,
        "weight_decay": 0.0,
        "batch_size": 16,
        "max_iterations": 2000,
        "objective": "meanflow",  # meanflow, rectified
        "euler_steps": 10,
        "dataset_profile": "interhuman",  # interhuman, interx
        "omega": None,  # None: taken from dataset_profile
        "p_drop": 0.1,
        "mu": 0.0,
        "sigma": 1.0,
        "p_instant": 0.25,
        "actor_loss_weight": 0.0,
        "checkpoint_every": 200,
    },
    "bsce": {
        "k_max": 8,
        "ramp_fraction": 0.5,
        "milestones": None,
        "mix_ramp_fraction": 0.5,
        "max_position": None,
    },
    "sample": {
        "n": 64,
        "format": "npz",  # npz, csv
    },
    "eval": {
        "embedder_hidden": 32,
        "features": 16,
        "embedder_iterations": 300,
        "embedder_lr": 3e-3,
        "embedder_batch_size": 64,
        "gate": 0.9,
        "enforce_gate": True,
        "pool_size": 32,
        "top_k": 3,
        "diversity_pairs": 300,
        "mmodality_repeats": 3,
        "drift_buckets": 4,
        "ablation_iterations": 300,
    },
}

PRESETS: Dict[str, Dict[str, Any]] = {
    "desk": {},
    "paper": {
        "vae": {"hidden": 256, "n_down_blocks": 2, "layers_per_block": 3},
        "model": {"hidden": 512, "n_layers": 7, "n_heads": 8, "mlp_layers": 5, "use_skip": True},
        "train": {"batch_size": 64, "lr": 1e-4, "p_instant": 0.25},
    },
}

# Guidance strength per dataset profile and generation mode.
GUIDANCE_PROFILES: Dict[str, Dict[str, float]] = {
    "interhuman": {"offline": 1.8, "online": 1.8},
    "interx": {"offline": 2.0, "online": 1.2},
}


class Config:
    """Resolved configuration tree for one armflow command."""

    def __init__(self, data: Dict[str, Any], path: Optional[Path] = None):
        self._data = data
        self._path = path

    @classmethod
    def load(
        cls,
        path: Optional[Path] = None,
        preset: Optional[str] = None,
        overrides: Iterable[str] = (),
        seed: Optional[int] = None,
    ) -> "Config":
        """Layer defaults, preset, config file and ``key=value`` overrides."""
        file_cfg: Dict[str, Any] = {}
        if path is not None:
            path = Path(path)
            if not path.exists():
                raise ConfigError(f"config file not found: {path}")
            with open(path) as f:
                file_cfg = yaml.safe_load(f) or {}
            if not isinstance(file_cfg, dict):
                raise ConfigError(f"config file {path} must hold a mapping")

        preset = preset or file_cfg.get("preset") or DEFAULT_CONFIG["preset"]
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset '{preset}' (choose from {', '.join(PRESETS)})")

        # Start with defaults
        config = copy.deepcopy(DEFAULT_CONFIG)
        config = cls._deep_merge(config, PRESETS[preset])

        # Layer config file, then command-line overrides
        cls._validate(file_cfg, DEFAULT_CONFIG)
        config = cls._deep_merge(config, file_cfg)
        for item in overrides:
            override = cls.parse_override(item)
            cls._validate(override, DEFAULT_CONFIG)
            config = cls._deep_merge(config, override)

        config["preset"] = preset
        if seed is not None:
            config["seed"] = int(seed)
        return cls(config, path)

    @staticmethod
    def _deep_merge(base: dict, override: dict) -> dict:
        """Deep merge two dictionaries."""
        result = base.copy()
        for key, value in override.items():
            if key in result and isinstance(result[key], dict) and isinstance(value, dict):
                result[key] = Config._deep_merge(result[key], value)
            else:
                result[key] = value
        return result

    @staticmethod
    def _validate(tree: dict, reference: dict, prefix: str = "") -> None:
        for key, value in tree.items():
            dotted = f"{prefix}{key}"
            if key not in reference:
                raise ConfigError(f"unknown config key '{dotted}'")
            if isinstance(reference[key], dict):
                if not isinstance(value, dict):
                    raise ConfigError(f"config key '{dotted}' must be a section")
                Config._validate(value, reference[key], dotted + ".")

    @staticmethod
    def parse_override(item: str) -> Dict[str, Any]:
        """Turn ``train.lr=3e-4`` into ``{"train": {"lr": 0.0003}}``."""
        if "=" not in item:
            raise ConfigError(f"override '{item}' is not of the form section.key=value")
        dotted, raw = item.split("=", 1)
        value = yaml.safe_load(raw) if raw.strip() else None
        tree: Dict[str, Any] = {}
        node = tree
        parts = dotted.strip().split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = value
        return tree

    def get(self, dotted: str) -> Any:
        node: Any = self._data
        for part in dotted.split("."):
            if not isinstance(node, dict) or part not in node:
                raise ConfigError(f"unknown config key '{dotted}'")
            node = node[part]
        return node

    @property
    def seed(self) -> int:
        return int(self._data["seed"])

    @property
    def preset(self) -> str:
        return self._data["preset"]

    @property
    def data(self) -> Dict[str, Any]:
        return self._data["data"]

    @property
    def vae(self) -> Dict[str, Any]:
        return self._data["vae"]

    @property
    def model(self) -> Dict[str, Any]:
        return self._data["model"]

    @property
    def train(self) -> Dict[str, Any]:
        return self._data["train"]

    @property
    def bsce(self) -> Dict[str, Any]:
        return self._data["bsce"]

    @property
    def sample(self) -> Dict[str, Any]:
        return self._data["sample"]

    @property
    def eval(self) -> Dict[str, Any]:
        return self._data["eval"]

    # Typed views. Imports are local: the modules owning these dataclasses
    # import armflow.core themselves.

    def toy_data_config(self):
        from ..data.toy import ToyDataConfig

        d = self.data
        return ToyDataConfig(
            length=int(d["length"]),
            n_labels=int(d["n_labels"]),
            fps=float(d["fps"]),
            jitter=float(d["jitter"]),
            lag=int(d["lag"]),
            radius=float(d["radius"]),
            distance=float(d["distance"]),
        )

    def vae_config(self):
        from ..nn.vae import VaeConfig

        v = self.vae
        return self._build(
            VaeConfig,
            latent=int(v["latent"]),
            hidden=int(v["hidden"]),
            n_down_blocks=int(v["n_down_blocks"]),
            layers_per_block=int(v["layers_per_block"]),
            downsample_factor=2 ** int(v["n_down_blocks"]),
            kl_weight=float(v["kl_weight"]),
            vel_weight=float(v["vel_weight"]),
        )

    def model_config(self):
        from ..nn.models import ModelConfig

        m = self.model
        return self._build(
            ModelConfig,
            token_dim=int(self.vae["latent"]),
            hidden=int(m["hidden"]),
            n_layers=int(m["n_layers"]),
            n_heads=int(m["n_heads"]),
            mlp_layers=int(m["mlp_layers"]),
            use_skip=bool(m["use_skip"]),
            use_pos_enc=bool(m["use_pos_enc"]),
            n_labels=int(self.data["n_labels"]),
            max_tokens=int(m["max_tokens"]),
        )

    def omega(self, mode: str) -> float:
        t = self.train
        if t["omega"] is not None:
            return float(t["omega"])
        profile = GUIDANCE_PROFILES.get(t["dataset_profile"])
        if profile is None:
            raise ConfigError(
                f"unknown dataset_profile '{t['dataset_profile']}' "
                f"(choose from {', '.join(GUIDANCE_PROFILES)})"
            )
        return profile[mode]

    def train_config(self, mode: str = "online"):
        from ..flow.field import CfgParams, TimestepSamplerConfig
        from ..train.optim import TrainConfig

        t = self.train
        guidance = self._build(CfgParams, omega=self.omega(mode), p_drop=float(t["p_drop"]))
        timesteps = self._build(
            TimestepSamplerConfig,
            mu=float(t["mu"]),
            sigma=float(t["sigma"]),
            p_instant=float(t["p_instant"]),
        )
        return self._build(
            TrainConfig,
            lr=float(t["lr"]),
            betas=tuple(float(b) for b in t["betas"]),
            eps=float(t["eps"]),
            weight_decay=float(t["weight_decay"]),
            batch_size=int(t["batch_size"]),
            max_iterations=int(t["max_iterations"]),
            seed=self.seed,
            guidance=guidance,
            timesteps=timesteps,
            objective=t["objective"],
            euler_steps=int(t["euler_steps"]),
            actor_loss_weight=float(t["actor_loss_weight"]),
            checkpoint_every=int(t["checkpoint_every"]),
        )

    def vae_train_config(self):
        """Optimizer settings for the VAE, reusing the flow trainer's record."""
        from ..train.optim import TrainConfig

        v, t = self.vae, self.train
        return self._build(
            TrainConfig,
            lr=float(v["lr"]),
            betas=tuple(float(b) for b in t["betas"]),
            eps=float(t["eps"]),
            weight_decay=float(t["weight_decay"]),
            batch_size=int(v["batch_size"]),
            max_iterations=int(v["iterations"]),
            seed=self.seed,
            checkpoint_every=int(v["checkpoint_every"]),
        )

    def schedule(self):
        from ..train.schedule import BsceSchedule

        b = self.bsce
        milestones = tuple(float(m) for m in b["milestones"]) if b["milestones"] else None
        return self._build(
            BsceSchedule,
            k_max=int(b["k_max"]),
            ramp_fraction=float(b["ramp_fraction"]),
            milestones=milestones,
        )

    def embedder_config(self):
        from ..eval.embedder import EmbedderConfig

        e = self.eval
        return self._build(
            EmbedderConfig,
            channels=4,
            hidden=int(e["embedder_hidden"]),
            features=int(e["features"]),
            n_labels=int(self.data["n_labels"]),
        )

    @staticmethod
    def _build(cls, **kwargs):
        try:
            return cls(**kwargs)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid {cls.__name__}: {exc}") from exc

    def save(self, path: Optional[Path] = None):
        """Save configuration to file."""
        save_path = Path(path) if path else self._path
        if save_path:
            save_path.parent.mkdir(parents=True, exist_ok=True)
            with open(save_path, "w") as f:
                yaml.safe_dump(self._data, f, default_flow_style=False, sort_keys=False)

    def to_dict(self) -> Dict[str, Any]:
        return copy.deepcopy(self._data)
