"""Denoiser backends and latent codecs."""
from .toy import ToyDenoiser, ToyLatentCodec
from .sd_adapter import SDAdapterSpec, BackendUnavailableError, load_backend

__all__ = ["ToyDenoiser", "ToyLatentCodec", "SDAdapterSpec", "BackendUnavailableError", "load_backend"]
