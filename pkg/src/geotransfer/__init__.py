"""Training-free, texture-aware geometry transfer with shared self-attention
in diffusion inversion and generation."""

__version__ = "0.1.0"

from .imagemask import AffineTransform, BinaryMask, Image, read_image, read_mask, write_image
from .pipeline import PipelineConfig, RunArtifacts, harmonize, run_ablation_suite

__all__ = [
    "AffineTransform",
    "BinaryMask",
    "Image",
    "PipelineConfig",
    "RunArtifacts",
    "harmonize",
    "read_image",
    "read_mask",
    "run_ablation_suite",
    "write_image",
]
