"""Deterministic raster augmentations for black-on-white line drawings.

Flip, random crop (bilinear-resized back to the original size), random
erase, and a periodic grid mask.  Erased and masked regions fill with
1.0 (white): patent drawings are line art on white paper, so white is
the natural occlusion value.

All randomized ops are pure functions of (image, policy, generator);
each record gets its own counter-based generator stream derived from
(policy seed, record_id), so augmentation is independent of batch
order.
"""

from __future__ import annotations

import hashlib
import math
import re
from dataclasses import dataclass
from typing import Tuple

import numpy as np


class ImageError(ValueError):
    """Raised for malformed raster inputs."""


@dataclass(frozen=True)
class RasterImage:
    """Grayscale raster, intensities in [0,1], row-major (height, width)."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim != 2 or px.shape[0] < 1 or px.shape[1] < 1:
            raise ImageError(f"pixels must be a non-empty 2-D array, got shape {px.shape}")
        if px.min() < 0.0 or px.max() > 1.0:
            raise ImageError("pixel intensities must lie in [0, 1]")
        object.__setattr__(self, "pixels", px)

    @property
    def width(self) -> int:
        return int(self.pixels.shape[1])

    @property
    def height(self) -> int:
        return int(self.pixels.shape[0])


@dataclass(frozen=True)
class AugmentPolicy:
    flip_prob: float = 0.5
    crop_scale_range: Tuple[float, float] = (0.6, 1.0)
    erase_prob: float = 0.25
    erase_area_range: Tuple[float, float] = (0.02, 0.2)
    gridmask_ratio: float = 0.5
    gridmask_unit_range: Tuple[int, int] = (16, 48)
    seed: int = 0

    def __post_init__(self):
        if not (0.0 <= self.flip_prob <= 1.0):
            raise ValueError("flip_prob must be in [0,1]")
        if not (0.0 <= self.erase_prob <= 1.0):
            raise ValueError("erase_prob must be in [0,1]")
        lo, hi = self.crop_scale_range
        if not (0.0 < lo <= hi <= 1.0):
            raise ValueError("crop_scale_range must satisfy 0 < lo <= hi <= 1")
        lo, hi = self.erase_area_range
        if not (0.0 < lo <= hi < 1.0):
            raise ValueError("erase_area_range must satisfy 0 < lo <= hi < 1")
        if not (0.0 < self.gridmask_ratio < 1.0):
            raise ValueError("gridmask_ratio must be in (0,1)")
        lo, hi = self.gridmask_unit_range
        if not (1 <= lo <= hi):
            raise ValueError("gridmask_unit_range must satisfy 1 <= lo <= hi")


def rng_for_record(seed: int, record_id: str) -> np.random.Generator:
    """Counter-based generator stream for one record.

    The Philox key is derived by hashing (seed, record_id), so streams
    are stable across platforms and independent of processing order.
    """
    digest = hashlib.sha256(f"{seed}:{record_id}".encode("utf-8")).digest()
    key = int.from_bytes(digest[:16], "little")
    return np.random.Generator(np.random.Philox(key=key))


def horizontal_flip(img: RasterImage) -> RasterImage:
    """Mirror columns: pixel (x, y) moves to (width-1-x, y)."""
    return RasterImage(img.pixels[:, ::-1].copy())


def bilinear_resize(pixels: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize with corner-aligned bilinear interpolation.

    Equal input/output sizes reproduce the input exactly; constant
    inputs stay constant up to floating-point rounding.
    """
    in_h, in_w = pixels.shape
    if (in_h, in_w) == (out_h, out_w):
        return pixels.copy()
    ys = np.linspace(0.0, in_h - 1.0, out_h) if out_h > 1 else np.zeros(1)
    xs = np.linspace(0.0, in_w - 1.0, out_w) if out_w > 1 else np.zeros(1)
    y0 = np.clip(np.floor(ys).astype(int), 0, in_h - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, in_w - 1)
    y1 = np.minimum(y0 + 1, in_h - 1)
    x1 = np.minimum(x0 + 1, in_w - 1)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]
    top = pixels[np.ix_(y0, x0)] * (1 - wx) + pixels[np.ix_(y0, x1)] * wx
    bottom = pixels[np.ix_(y1, x0)] * (1 - wx) + pixels[np.ix_(y1, x1)] * wx
    out = top * (1 - wy) + bottom * wy
    return np.clip(out, 0.0, 1.0)


def random_crop(
    img: RasterImage, policy: AugmentPolicy, rng: np.random.Generator
) -> RasterImage:
    """Crop a sub-rectangle with area fraction in crop_scale_range and
    resize it back to the original dimensions.

    Both crop sides scale by sqrt(fraction); sides round to at least one
    pixel.
    """
    lo, hi = policy.crop_scale_range
    scale = float(rng.uniform(lo, hi))
    side = math.sqrt(scale)
    cw = min(img.width, max(1, round(img.width * side)))
    ch = min(img.height, max(1, round(img.height * side)))
    x0 = int(rng.integers(0, img.width - cw + 1))
    y0 = int(rng.integers(0, img.height - ch + 1))
    crop = img.pixels[y0 : y0 + ch, x0 : x0 + cw]
    return RasterImage(bilinear_resize(crop, img.height, img.width))


def random_erase(
    img: RasterImage, policy: AugmentPolicy, rng: np.random.Generator
) -> RasterImage:
    """With probability erase_prob, fill one rectangle with white.

    The rectangle is square before clamping: side = round(sqrt of the
    target pixel area), clipped to each image dimension.
    """
    if float(rng.uniform(0.0, 1.0)) >= policy.erase_prob:
        return RasterImage(img.pixels.copy())
    lo, hi = policy.erase_area_range
    frac = float(rng.uniform(lo, hi))
    side = max(1, round(math.sqrt(frac * img.width * img.height)))
    ew = min(side, img.width)
    eh = min(side, img.height)
    x0 = int(rng.integers(0, img.width - ew + 1))
    y0 = int(rng.integers(0, img.height - eh + 1))
    out = img.pixels.copy()
    out[y0 : y0 + eh, x0 : x0 + ew] = 1.0
    return RasterImage(out)


@dataclass(frozen=True)
class GridmaskResult:
    image: RasterImage
    unit_exceeds_image: bool = False


def gridmask(
    img: RasterImage, policy: AugmentPolicy, rng: np.random.Generator
) -> GridmaskResult:
    """Tile a periodic white square mask over the image.

    Each period of size d hides a square of side round((1-ratio)*d) at a
    random phase, so the masked fraction approximates (1-ratio)^2.  A
    unit larger than the image leaves it unchanged and sets the warning
    flag.
    """
    lo, hi = policy.gridmask_unit_range
    unit = int(rng.integers(lo, hi + 1))
    if unit > min(img.width, img.height):
        return GridmaskResult(RasterImage(img.pixels.copy()), unit_exceeds_image=True)
    hole = round((1.0 - policy.gridmask_ratio) * unit)
    if hole <= 0:
        return GridmaskResult(RasterImage(img.pixels.copy()))
    ox = int(rng.integers(0, unit))
    oy = int(rng.integers(0, unit))
    xs = (np.arange(img.width) + ox) % unit < hole
    ys = (np.arange(img.height) + oy) % unit < hole
    mask = ys[:, None] & xs[None, :]
    out = img.pixels.copy()
    out[mask] = 1.0
    return GridmaskResult(RasterImage(out))


_PGM_HEADER = re.compile(rb"^P5\s+(\d+)\s+(\d+)\s+(\d+)\s")


def write_pgm(img: RasterImage, path) -> None:
    """Write a binary (P5) PGM with maxval 255."""
    data = np.rint(img.pixels * 255.0).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.width} {img.height}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def read_pgm(path) -> RasterImage:
    """Read a binary (P5) PGM into intensities in [0,1]."""
    with open(path, "rb") as fh:
        blob = fh.read()
    m = _PGM_HEADER.match(blob)
    if not m:
        raise ImageError(f"{path}: not a binary PGM (P5) file")
    width, height, maxval = (int(g) for g in m.groups())
    if maxval < 1 or maxval > 255:
        raise ImageError(f"{path}: unsupported maxval {maxval}")
    raster = blob[m.end() :]
    if len(raster) < width * height:
        raise ImageError(f"{path}: truncated raster data")
    data = np.frombuffer(raster[: width * height], dtype=np.uint8)
    return RasterImage(data.reshape(height, width).astype(np.float64) / maxval)
