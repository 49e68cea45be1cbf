"""Contract for plugging a real Stable Diffusion inpainting checkpoint in.

No weights ship with this package and no adapter is implemented here; see
``docs/ADAPTER.md`` for what an adapter must provide. :func:`load_backend`
is the single switch point used by the CLI.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field


class BackendUnavailableError(RuntimeError):
    pass


@dataclass(frozen=True)
class SDAdapterSpec:
    checkpoint: str = "runwayml/stable-diffusion-inpainting"
    # our layer id -> module path of the UNet self-attention ("attn1") block
    layer_names: dict = field(default_factory=dict)
    guidance_scale: float = 1.0
    latent_downsample: int = 8
    latent_channels: int = 4
    unet_in_channels: int = 9  # 4 latent + 1 mask + 4 masked-image latent


BACKENDS = ("toy", "sd-adapter")


def backend_name(env=None) -> str:
    env = os.environ if env is None else env
    name = env.get("HARMONIZE_BACKEND", "toy")
    if name not in BACKENDS:
        raise ValueError(f"HARMONIZE_BACKEND must be one of {BACKENDS}, got {name!r}")
    return name


def load_backend(name: str, **kwargs):
    """Return ``(codec_factory, denoiser_factory)`` for a backend name."""
    if name == "toy":
        from .toy import ToyDenoiser, ToyLatentCodec

        return ToyLatentCodec, ToyDenoiser
    if name == "sd-adapter":
        raise BackendUnavailableError(
            "the sd-adapter backend is a documented contract only; provide an object with "
            "predict_noise(z, t, cond, router) and attention_layers (see docs/ADAPTER.md)"
        )
    raise ValueError(f"unknown backend {name!r}; expected one of {BACKENDS}")
