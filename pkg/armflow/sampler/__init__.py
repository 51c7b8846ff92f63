"""Offline and online reactor generation."""

from .generate import (
    Generation,
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

__all__ = [
    "Generation",
    "GenerationRequest",
    "OnlineTrace",
    "decode_generation",
    "noise_generator",
    "offline_generate",
    "online_generate",
    "online_generate_request",
    "read_generation",
    "replay_generate",
    "write_generation",
]
