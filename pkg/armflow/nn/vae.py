"""Causal 1D-convolutional VAE that turns motion frames into latent tokens."""

import logging
from dataclasses import dataclass
from typing import Any, Dict, Optional, Tuple, Union

import numpy as np

from ..autodiff import Value, as_array, no_grad, ops
from ..core.store import CheckpointMixin, ParameterStore
from ..errors import ContractViolationError, NumericError, ShapeMismatchError
from .layers import ParamInit, causal_conv1d, linear, upsample

logger = logging.getLogger(__name__)

ROLES = {"actor": 0, "reactor": 1}
DOWN_KERNEL = 4
RES_KERNEL = 3


@dataclass(frozen=True)
class VaeConfig:
    channels: int = 4
    latent: int = 8
    hidden: int = 64
    n_down_blocks: int = 2
    layers_per_block: int = 2
    downsample_factor: int = 4
    kl_weight: float = 1e-4
    vel_weight: float = 0.5

    def __post_init__(self):
        if self.downsample_factor != 2**self.n_down_blocks:
            raise ValueError(
                f"downsample_factor must be 2**n_down_blocks = {2 ** self.n_down_blocks}, "
                f"got {self.downsample_factor}"
            )


@dataclass
class MotionSequence:
    frames: np.ndarray
    role: str = "actor"
    fps: float = 20.0

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2:
            raise ShapeMismatchError(f"motion frames must be (T, D), got {self.frames.shape}")
        if not np.all(np.isfinite(self.frames)):
            raise NumericError("motion sequence contains non-finite values")
        if self.role not in ROLES:
            raise ContractViolationError(f"unknown role '{self.role}'")

    def __len__(self) -> int:
        return self.frames.shape[0]


@dataclass
class LatentSequence:
    tokens: np.ndarray
    role: str = "reactor"
    length: Optional[int] = None  # frame count before padding

    def __len__(self) -> int:
        return self.tokens.shape[0]


def role_ids(role: Union[str, np.ndarray], batch: int) -> np.ndarray:
    if isinstance(role, str):
        return np.full(batch, ROLES[role], dtype=np.int64)
    return np.asarray(role, dtype=np.int64)


def pad_frames(frames: np.ndarray, factor: int) -> Tuple[np.ndarray, int]:
    """Zero-pad the time axis of (B, T, D) frames to a multiple of ``factor``."""
    length = frames.shape[1]
    if length == 0:
        raise ContractViolationError("cannot encode an empty sequence")
    pad = (-length) % factor
    if pad:
        frames = np.concatenate([frames, np.zeros((frames.shape[0], pad, frames.shape[2]))], axis=1)
    return frames, length


def reparameterize(mean: Any, logvar: Any, rng: np.random.Generator) -> Value:
    """``mean + exp(logvar / 2) * eta`` with ``eta ~ N(0, I)``."""
    if tuple(np.shape(as_array(mean))) != tuple(np.shape(as_array(logvar))):
        raise ShapeMismatchError("mean and logvar shapes differ")
    eta = rng.standard_normal(np.shape(as_array(mean)))
    return ops.add(mean, ops.mul(ops.exp(ops.mul(logvar, 0.5)), eta))


def kl_divergence(mean: Any, logvar: Any) -> Value:
    """Closed-form KL(N(mean, e^logvar) || N(0, 1)), averaged per latent element."""
    terms = ops.add(ops.add(ops.square(mean), ops.exp(logvar)), ops.mul(logvar, -1.0))
    return ops.mul(ops.add(ops.mean(terms), -1.0), 0.5)


def _mse(a, b) -> Value:
    return ops.mean(ops.square(ops.add(a, ops.mul(b, -1.0))))


def _frame_diff(x):
    later = ops.getitem(x, (slice(None), slice(1, None)))
    earlier = ops.getitem(x, (slice(None), slice(None, -1)))
    return ops.add(later, ops.mul(earlier, -1.0))


class MotionVAE(CheckpointMixin):
    """One encoder/decoder shared by actor and reactor through a role embedding."""

    KIND = "vae"
    CONFIG = VaeConfig

    def __init__(self, cfg: VaeConfig, params: ParameterStore):
        self.cfg = cfg
        self.params = params

    @classmethod
    def init(cls, cfg: VaeConfig, seed: int) -> "MotionVAE":
        store = ParameterStore()
        init = ParamInit(store, np.random.default_rng(seed))
        h = cfg.hidden
        init.normal("vae.role", (len(ROLES), h), 0.1)
        init.linear("vae.enc.in", cfg.channels, h)
        for b in range(cfg.n_down_blocks):
            init.linear(f"vae.enc.down{b}", DOWN_KERNEL * h, h)
            for layer in range(cfg.layers_per_block):
                init.linear(f"vae.enc.block{b}.res{layer}", RES_KERNEL * h, h)
        init.linear("vae.enc.mean", h, cfg.latent)
        init.linear("vae.enc.logvar", h, cfg.latent)
        init.linear("vae.dec.in", cfg.latent, h)
        for b in range(cfg.n_down_blocks):
            for layer in range(cfg.layers_per_block):
                init.linear(f"vae.dec.block{b}.res{layer}", RES_KERNEL * h, h)
            init.linear(f"vae.dec.up{b}", RES_KERNEL * h, h)
        init.linear("vae.dec.out", h, cfg.channels)
        return cls(cfg, store)

    def _role(self, roles: np.ndarray):
        emb = ops.embedding(self.params["vae.role"], roles)
        return ops.reshape(emb, (len(roles), 1, self.cfg.hidden))

    def _residual(self, name: str, h):
        return ops.add(h, causal_conv1d(self.params, name, ops.gelu(h), RES_KERNEL, 1))

    def encode_batch(
        self, frames: np.ndarray, roles: Union[str, np.ndarray]
    ) -> Tuple[Value, Value]:
        """Posterior (mean, logvar) of shape (B, ceil(T / factor), latent)."""
        frames = np.asarray(frames, dtype=np.float64)
        if frames.ndim != 3 or frames.shape[-1] != self.cfg.channels:
            raise ShapeMismatchError(
                f"expected frames (B, T, {self.cfg.channels}), got {frames.shape}"
            )
        frames, _ = pad_frames(frames, self.cfg.downsample_factor)
        roles = role_ids(roles, frames.shape[0])
        p = self.params
        h = ops.add(linear(p, "vae.enc.in", frames), self._role(roles))
        for b in range(self.cfg.n_down_blocks):
            h = ops.gelu(causal_conv1d(p, f"vae.enc.down{b}", h, DOWN_KERNEL, 2))
            for layer in range(self.cfg.layers_per_block):
                h = self._residual(f"vae.enc.block{b}.res{layer}", h)
        return linear(p, "vae.enc.mean", h), linear(p, "vae.enc.logvar", h)

    def decode_batch(self, z: Any, roles: Union[str, np.ndarray], length: Optional[int] = None):
        """Frames of shape (B, length, channels); padding frames are trimmed."""
        p = self.params
        batch = np.shape(as_array(z))[0]
        h = ops.add(linear(p, "vae.dec.in", z), self._role(role_ids(roles, batch)))
        for b in range(self.cfg.n_down_blocks):
            for layer in range(self.cfg.layers_per_block):
                h = self._residual(f"vae.dec.block{b}.res{layer}", h)
            h = ops.gelu(causal_conv1d(p, f"vae.dec.up{b}", upsample(h, 2), RES_KERNEL, 1))
        out = linear(p, "vae.dec.out", h)
        if length is not None and length != out.shape[1]:
            out = ops.getitem(out, (slice(None), slice(0, length)))
        return out

    def encode(self, x: MotionSequence) -> Tuple[LatentSequence, LatentSequence]:
        with no_grad():
            mean, logvar = self.encode_batch(x.frames[None], x.role)
        return (
            LatentSequence(mean.data[0], x.role, len(x)),
            LatentSequence(logvar.data[0], x.role, len(x)),
        )

    def decode(
        self, z: LatentSequence, length: Optional[int] = None, fps: float = 20.0
    ) -> MotionSequence:
        length = length if length is not None else z.length
        with no_grad():
            frames = self.decode_batch(z.tokens[None], z.role, length)
        return MotionSequence(frames.data[0], z.role, fps)



def vae_loss(
    vae: MotionVAE, frames: np.ndarray, roles: Union[str, np.ndarray], rng: np.random.Generator
) -> Tuple[Value, Dict[str, float]]:
    """Reconstruction + kl_weight * KL + vel_weight * frame-difference MSE."""
    frames = np.asarray(frames, dtype=np.float64)
    cfg = vae.cfg
    mean, logvar = vae.encode_batch(frames, roles)
    z = reparameterize(mean, logvar, rng)
    recon = vae.decode_batch(z, roles, frames.shape[1])

    recon_term = _mse(recon, frames)
    kl_term = kl_divergence(mean, logvar)
    loss = ops.add(recon_term, ops.mul(kl_term, cfg.kl_weight))
    vel_term = 0.0
    if frames.shape[1] > 1:
        vel = _mse(_frame_diff(recon), _frame_diff(frames))
        loss = ops.add(loss, ops.mul(vel, cfg.vel_weight))
        vel_term = vel.item()
    if not np.isfinite(loss.item()):
        raise NumericError("non-finite VAE loss")
    return loss, {"recon": recon_term.item(), "kl": kl_term.item(), "vel": vel_term}
