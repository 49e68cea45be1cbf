"""Geometry-image construction: patch transplantation plus colour adjustment."""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .imagemask import (
    AffineTransform,
    BinaryMask,
    EmptyRegionError,
    Image,
    apply_transform,
    boundary_ring,
    dilate,
)


class ColorMode(str, Enum):
    NONE = "none"
    SHIFT = "shift"
    HISTOGRAM = "histogram"


@dataclass(frozen=True)
class ColorStats:
    mean_rgb: tuple[float, float, float]

    def __post_init__(self):
        v = tuple(float(x) for x in self.mean_rgb)
        if len(v) != 3 or not all(0.0 <= x <= 1.0 for x in v):
            raise ValueError(f"mean_rgb must be three values in [0, 1], got {self.mean_rgb}")
        object.__setattr__(self, "mean_rgb", v)

    def as_array(self) -> np.ndarray:
        return np.array(self.mean_rgb)


@dataclass(frozen=True, eq=False)
class EditResult:
    geometry_image: Image
    geometry_mask: BinaryMask
    pasted_image: Image
    patch: Image
    c_src: ColorStats | None = None
    c_tar: ColorStats | None = None


def ring_mean_color(image: Image, mask: BinaryMask, radius: int) -> ColorStats:
    """Mean colour over the ring just outside ``mask``."""
    ring = boundary_ring(mask, radius).as_bool()
    return ColorStats(tuple(np.clip(image.pixels[ring].mean(axis=0), 0.0, 1.0)))


def color_shift_raw(pixels: np.ndarray, mask: BinaryMask, c_src: ColorStats,
                    c_tar: ColorStats, a: float) -> np.ndarray:
    """Uniform colour shift without clamping.

    ``p + a * M * (c_tar - c_src)``. Unmasked pixels are returned as
    bit-exact copies.
    """
    if not 0.0 <= a <= 1.0:
        raise ValueError(f"colour-shift strength a must be in [0, 1], got {a}")
    pixels = np.asarray(pixels, dtype=np.float64)
    if pixels.shape[:2] != mask.shape:
        raise ValueError("mask shape does not match image")
    out = pixels.copy()
    sel = mask.as_bool()
    out[sel] = pixels[sel] + a * (c_tar.as_array() - c_src.as_array())
    return out


def color_shift(image: Image, mask: BinaryMask, c_src: ColorStats, c_tar: ColorStats,
                a: float) -> Image:
    return Image.clamped(color_shift_raw(image.pixels, mask, c_src, c_tar, a))


def _match_channel(values: np.ndarray, ref: np.ndarray) -> np.ndarray:
    # empirical-CDF quantile mapping; ties share one quantile
    src_vals, src_idx, src_counts = np.unique(values, return_inverse=True, return_counts=True)
    ref_vals, ref_counts = np.unique(ref, return_counts=True)
    src_q = np.cumsum(src_counts) / values.size
    ref_q = np.cumsum(ref_counts) / ref.size
    return np.interp(src_q, ref_q, ref_vals)[src_idx]


def histogram_match(image: Image, mask: BinaryMask, reference: Image,
                    ref_mask: BinaryMask) -> Image:
    """Per-channel CDF matching of the masked pixels of ``image`` to the
    masked pixels of ``reference``. Pixels outside ``mask`` are untouched."""
    if not mask.any() or not ref_mask.any():
        raise EmptyRegionError("histogram matching needs non-empty masks")
    sel, ref_sel = mask.as_bool(), ref_mask.as_bool()
    out = np.array(image.pixels)
    for ch in range(3):
        chan = out[..., ch]
        chan[sel] = _match_channel(image.pixels[..., ch][sel], reference.pixels[..., ch][ref_sel])
    return Image.clamped(out)


def compose(foreground: Image, mask: BinaryMask, background: Image) -> Image:
    return Image(np.where(mask.as_bool()[..., None], foreground.pixels, background.pixels))


def build_edit(src: Image, src_mask: BinaryMask, tar: Image, t: AffineTransform,
               a: float = 0.5, color_mode: ColorMode | str = ColorMode.SHIFT,
               ring_radius: int = 8, allow_empty: bool = False) -> EditResult:
    """Transplant the masked source patch into the target frame and adjust
    its colour.

    ``c_src`` is measured on the ring around ``src_mask`` in the source
    frame; ``c_tar`` on the ring around the transformed mask in the target.
    Histogram mode matches the patch to the target pixels under the dilated
    transplantation mask.
    """
    color_mode = ColorMode(color_mode)
    if src.shape != tar.shape:
        raise ValueError(f"source {src.shape} and target {tar.shape} sizes differ")
    patch, geo_mask = apply_transform(src, src_mask, t, allow_empty=allow_empty)

    c_src = c_tar = None
    if color_mode is ColorMode.SHIFT:
        if not 0.0 <= a <= 1.0:
            raise ValueError(f"colour-shift strength a must be in [0, 1], got {a}")
        c_src = ring_mean_color(src, src_mask, ring_radius)
        c_tar = ring_mean_color(tar, geo_mask, ring_radius)
        geo = color_shift(patch, geo_mask, c_src, c_tar, a)
    elif color_mode is ColorMode.HISTOGRAM:
        geo = histogram_match(patch, geo_mask, tar, dilate(geo_mask, ring_radius))
    else:
        geo = patch

    return EditResult(
        geometry_image=geo,
        geometry_mask=geo_mask,
        pasted_image=compose(geo, geo_mask, tar),
        patch=patch,
        c_src=c_src,
        c_tar=c_tar,
    )
