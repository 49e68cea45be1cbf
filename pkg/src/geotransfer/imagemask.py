"""Image and binary-mask value types, morphology, affine patch transforms
and mask resampling.

All values are immutable: arrays are copied on construction and marked
read-only, and every operation returns a new object.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image as PILImage
from scipy import ndimage


class EmptyRegionError(ValueError):
    """Raised when a mask-derived region that must be non-empty is empty."""


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Image:
    """H x W x 3 float64 pixels in [0, 1]."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim != 3 or px.shape[2] != 3 or px.shape[0] < 1 or px.shape[1] < 1:
            raise ValueError(f"image must be HxWx3, got shape {px.shape}")
        if not np.all(np.isfinite(px)):
            raise ValueError("image contains non-finite values")
        if px.min() < 0.0 or px.max() > 1.0:
            raise ValueError("image values must lie in [0, 1]; clamp first")
        object.__setattr__(self, "pixels", _frozen(px))

    @classmethod
    def clamped(cls, pixels) -> "Image":
        return cls(np.clip(np.asarray(pixels, dtype=np.float64), 0.0, 1.0))

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape[:2]

    def __eq__(self, other):
        return isinstance(other, Image) and np.array_equal(self.pixels, other.pixels)

    __hash__ = None


@dataclass(frozen=True, eq=False)
class BinaryMask:
    """H x W array of {0, 1} stored as uint8."""

    bits: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.bits)
        if b.ndim != 2 or b.shape[0] < 1 or b.shape[1] < 1:
            raise ValueError(f"mask must be 2-D and non-empty, got shape {b.shape}")
        if b.dtype == bool:
            b = b.astype(np.uint8)
        elif not np.all((b == 0) | (b == 1)):
            raise ValueError("mask elements must be exactly 0 or 1")
        object.__setattr__(self, "bits", _frozen(b.astype(np.uint8)))

    @classmethod
    def zeros(cls, h: int, w: int) -> "BinaryMask":
        return cls(np.zeros((h, w), dtype=np.uint8))

    @classmethod
    def ones(cls, h: int, w: int) -> "BinaryMask":
        return cls(np.ones((h, w), dtype=np.uint8))

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.bits.shape

    def as_bool(self) -> np.ndarray:
        return self.bits.astype(bool)

    def count(self) -> int:
        return int(self.bits.sum())

    def any(self) -> bool:
        return bool(self.bits.any())

    def __eq__(self, other):
        return isinstance(other, BinaryMask) and np.array_equal(self.bits, other.bits)

    __hash__ = None


@dataclass(frozen=True)
class AffineTransform:
    """Shift (pixels, +x right, +y down), isotropic scale and rotation
    (degrees, counter-clockwise as displayed).

    Scale and rotation act about the centre of the mask's bounding box,
    so the patch grows or turns in place before it is shifted.
    """

    dx: float = 0.0
    dy: float = 0.0
    scale: float = 1.0
    rotation: float = 0.0

    def __post_init__(self):
        if not (self.scale > 0 and math.isfinite(self.scale)):
            raise ValueError(f"scale must be a positive finite number, got {self.scale}")
        for name in ("dx", "dy", "rotation"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")

    @property
    def is_identity(self) -> bool:
        return self.dx == 0 and self.dy == 0 and self.scale == 1 and self.rotation == 0


def dilate(mask: BinaryMask, radius: int) -> BinaryMask:
    """Binary dilation with a (2*radius+1)-wide square structuring element."""
    if radius < 0:
        raise ValueError("radius must be >= 0")
    if radius == 0 or not mask.any():
        return mask
    # a square element is separable: a 1-D max filter per axis
    out = ndimage.maximum_filter(mask.bits, size=2 * radius + 1, mode="constant", cval=0)
    return BinaryMask(out)


def complement(mask: BinaryMask) -> BinaryMask:
    return BinaryMask(1 - mask.bits)


def boundary_ring(mask: BinaryMask, radius: int) -> BinaryMask:
    """Pixels within ``radius`` (Chebyshev) of the mask but outside it.

    Raises
    ------
    EmptyRegionError
        If the ring is empty, e.g. for an empty mask or a mask covering
        the whole frame. Colour statistics over the ring are then undefined.
    """
    if radius < 1:
        raise ValueError("ring radius must be >= 1")
    ring = dilate(mask, radius).bits & complement(mask).bits
    if not ring.any():
        raise EmptyRegionError("boundary ring is empty (mask is empty or covers the frame)")
    return BinaryMask(ring)


def _centre(mask: BinaryMask) -> tuple[float, float]:
    rows = np.flatnonzero(mask.bits.any(axis=1))
    cols = np.flatnonzero(mask.bits.any(axis=0))
    if rows.size == 0:
        return (mask.height - 1) / 2.0, (mask.width - 1) / 2.0
    return (rows[0] + rows[-1]) / 2.0, (cols[0] + cols[-1]) / 2.0


def _inverse_map(t: AffineTransform, centre: tuple[float, float]):
    """Matrix/offset mapping output (row, col) to input (row, col)."""
    th = math.radians(t.rotation)
    c, s = math.cos(th), math.sin(th)
    # forward, in (x, y) with y down: p' = S R (p - ctr) + ctr + shift, where a
    # visually counter-clockwise turn is [[c, s], [-s, c]]. In (row, col):
    fwd = t.scale * np.array([[c, -s], [s, c]])
    inv = np.linalg.inv(fwd)
    ctr = np.asarray(centre)
    shift = np.array([t.dy, t.dx])
    offset = ctr - inv @ (ctr + shift)
    return inv, offset


def apply_transform(image: Image, mask: BinaryMask, t: AffineTransform,
                    allow_empty: bool = False) -> tuple[Image, BinaryMask]:
    """Map the patch ``mask * image`` and ``mask`` into target coordinates.

    The image is resampled bilinearly and the mask by nearest neighbour.
    The returned patch is ``T(mask) * T(image)``, which keeps the bilinear
    kernel from mixing the zero background into the patch rim. Samples
    from outside the frame are 0.
    """
    if image.shape != mask.shape:
        raise ValueError(f"mask shape {mask.shape} does not match image shape {image.shape}")
    if t.is_identity:
        new_mask = mask
        warped = image.pixels
    else:
        mat, offset = _inverse_map(t, _centre(mask))
        new_mask = BinaryMask(
            ndimage.affine_transform(mask.bits, mat, offset, order=0, mode="constant", cval=0) > 0
        )
        warped = np.stack(
            [ndimage.affine_transform(image.pixels[..., ch], mat, offset, order=1,
                                      mode="constant", cval=0.0)
             for ch in range(3)],
            axis=-1,
        )
    if not new_mask.any() and not allow_empty:
        raise EmptyRegionError("transformed mask is empty; the geometry fell off the frame")
    patch = np.where(new_mask.as_bool()[..., None], warped, 0.0)
    return Image.clamped(patch), new_mask


def _area_weights(n_in: int, n_out: int) -> np.ndarray:
    """n_out x n_in matrix of overlap fractions for area averaging."""
    edges = np.arange(n_out + 1) * (n_in / n_out)
    lo, hi = edges[:-1, None], edges[1:, None]
    cells = np.arange(n_in)[None, :]
    overlap = np.clip(np.minimum(hi, cells + 1) - np.maximum(lo, cells), 0.0, None)
    return overlap / overlap.sum(axis=1, keepdims=True)


def resize_mask_to(mask: BinaryMask, h: int, w: int) -> BinaryMask:
    """Area-average resample to h x w, then threshold at 0.5 (ties go to 1)."""
    if h < 1 or w < 1:
        raise ValueError("target size must be at least 1x1")
    if (h, w) == mask.shape:
        return mask
    avg = _area_weights(mask.height, h) @ mask.bits.astype(np.float64) @ _area_weights(mask.width, w).T
    return BinaryMask(avg >= 0.5 - 1e-9)


# -- PNG I/O ----------------------------------------------------------------

def read_image(path) -> Image:
    with PILImage.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return Image(arr / 255.0)


def write_image(image: Image, path) -> Path:
    arr = np.clip(np.round(image.pixels * 255.0), 0, 255).astype(np.uint8)
    path = Path(path)
    PILImage.fromarray(arr, mode="RGB").save(path, format="PNG")
    return path


def read_mask(path) -> BinaryMask:
    with PILImage.open(path) as im:
        arr = np.asarray(im.convert("L"))
    return BinaryMask(arr >= 128)


def write_mask(mask: BinaryMask, path) -> Path:
    path = Path(path)
    PILImage.fromarray((mask.bits * 255).astype(np.uint8), mode="L").save(path, format="PNG")
    return path
