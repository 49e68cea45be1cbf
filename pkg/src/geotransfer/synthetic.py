"""Procedural test scenes: textured surfaces with a shaded hole."""
from __future__ import annotations

import numpy as np

from .imagemask import BinaryMask, Image


def wood(h: int, w: int, seed: int = 0) -> Image:
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    warp = 3.0 * np.sin(yy / 9.0 + rng.uniform(0, 6)) + rng.normal(0, 0.4, (h, w))
    grain = 0.5 + 0.5 * np.sin((xx + warp) / 2.5)
    base = np.array([0.55, 0.36, 0.18])
    return Image.clamped(base * (0.75 + 0.35 * grain[..., None]))


def brushed_metal(h: int, w: int, seed: int = 0) -> Image:
    rng = np.random.default_rng(seed)
    streaks = rng.normal(0, 1, (1, w)).repeat(h, axis=0)
    streaks = 0.5 * streaks + 0.2 * rng.normal(0, 1, (h, w))
    grey = 0.62 + 0.05 * streaks
    return Image.clamped(np.stack([grey, grey, grey * 1.04], axis=-1))


def disc_mask(h: int, w: int, cy: float, cx: float, r: float) -> BinaryMask:
    yy, xx = np.mgrid[0:h, 0:w]
    return BinaryMask((yy - cy) ** 2 + (xx - cx) ** 2 <= r * r)


def with_hole(surface: Image, cy: float, cx: float, r: float) -> Image:
    """Darken a disc with a lit lower-right rim, like a drilled hole."""
    h, w = surface.shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    d = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2) / r
    inside = d <= 1.0
    rim = np.clip(((yy - cy) + (xx - cx)) / (r * 1.4), 0.0, 1.0) * (d > 0.6)
    shade = np.where(inside, 0.25 + 0.5 * rim, 1.0)
    return Image.clamped(surface.pixels * shade[..., None])


def scene(size: int = 64, seed: int = 0):
    """(source, source mask, target): holed wood and plain brushed metal."""
    c, r = size / 2.0, size / 8.0
    src = with_hole(wood(size, size, seed), c, c, r)
    mask = disc_mask(size, size, c, c, r * 1.25)
    tar = brushed_metal(size, size, seed + 1)
    return src, mask, tar
