"""Search-patch extraction and handcrafted multi-channel features.

Images are 2-D float arrays with values in [0, 1], row-major. Continuous
coordinates put pixel (i, j) on the square [j, j+1) x [i, i+1), so its center
sits at (j + 0.5, i + 0.5) and a box's corner coordinates line up with the
on-disk top-left-corner convention without half-pixel shifts.

The feature map replaces a learned backbone: per stride-sized block it stacks
mean intensity, mean gradient magnitude, and a soft-binned histogram of
unsigned gradient orientations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .boxes import Box2D

__all__ = [
    "GrayImage",
    "AffineMap",
    "FeatureMap",
    "PatchConfig",
    "validate_image",
    "crop_resize",
    "featurize",
]

GrayImage = np.ndarray  # (H, W) float in [0, 1]


@dataclass(frozen=True)
class PatchConfig:
    """Geometry of the per-frame search patch and its feature grid."""

    size_factor: float = 5.0
    out_size: int = 144
    stride: int = 4
    orientation_bins: int = 8

    def __post_init__(self) -> None:
        if self.size_factor <= 1.0:
            raise ValueError("size_factor must be > 1")
        if self.out_size % self.stride != 0:
            raise ValueError("stride must divide out_size")
        if self.orientation_bins < 2:
            raise ValueError("orientation_bins must be >= 2")

    @property
    def n_channels(self) -> int:
        return 2 + self.orientation_bins

    @property
    def grid_size(self) -> int:
        return self.out_size // self.stride


@dataclass(frozen=True)
class AffineMap:
    """Similarity transform patch -> image: (x, y) -> (x0 + s*x, y0 + s*y)."""

    scale: float
    x0: float
    y0: float

    def to_image(self, x: float, y: float) -> tuple[float, float]:
        return (self.x0 + self.scale * x, self.y0 + self.scale * y)

    def to_patch(self, x: float, y: float) -> tuple[float, float]:
        return ((x - self.x0) / self.scale, (y - self.y0) / self.scale)

    def box_to_image(self, box: Box2D) -> Box2D:
        cx, cy = self.to_image(box.cx, box.cy)
        return Box2D(cx, cy, box.w * self.scale, box.h * self.scale)

    def box_to_patch(self, box: Box2D) -> Box2D:
        cx, cy = self.to_patch(box.cx, box.cy)
        return Box2D(cx, cy, box.w / self.scale, box.h / self.scale)


@dataclass(frozen=True)
class FeatureMap:
    """(C, H, W) feature grid over a patch; cell (i, j) covers a stride block."""

    values: np.ndarray
    stride: int
    origin: tuple[float, float]  # patch coordinates of cell (0, 0)'s center

    @property
    def channels(self) -> int:
        return self.values.shape[0]

    @property
    def height(self) -> int:
        return self.values.shape[1]

    @property
    def width(self) -> int:
        return self.values.shape[2]

    def cell_to_patch(self, u: float, v: float) -> tuple[float, float]:
        """Continuous cell coordinates (col u, row v) -> patch pixels."""
        return (self.origin[0] + u * self.stride, self.origin[1] + v * self.stride)

    def patch_to_cell(self, x: float, y: float) -> tuple[float, float]:
        return ((x - self.origin[0]) / self.stride, (y - self.origin[1]) / self.stride)


def validate_image(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image)
    if image.ndim != 2 or min(image.shape) < 8:
        raise ValueError(f"expected a 2-D image of side >= 8, got shape {image.shape}")
    if not np.all(np.isfinite(image)) or image.min() < 0.0 or image.max() > 1.0:
        raise ValueError("image values must be finite and in [0, 1]")
    return image.astype(float, copy=False)


def _sample_axis(coords: np.ndarray, size: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Bilinear sample positions along one axis with edge replication."""
    u = coords - 0.5  # pixel centers sit at integer + 0.5
    i0 = np.floor(u).astype(int)
    t = u - i0
    lo = np.clip(i0, 0, size - 1)
    hi = np.clip(i0 + 1, 0, size - 1)
    return lo, hi, t


def crop_resize(image: GrayImage, center: tuple[float, float],
                target_size: tuple[float, float], size_factor: float = 5.0,
                out_size: int = 144) -> tuple[GrayImage, AffineMap]:
    """Crop a square region around center and resample it to out_size^2.

    The region side is size_factor * sqrt(w*h) of the target; content outside
    the frame is filled by edge replication. Returns the patch plus the exact
    patch->image coordinate transform.
    """
    image = validate_image(image)
    cx, cy = (float(v) for v in center)
    if not (math.isfinite(cx) and math.isfinite(cy)):
        raise ValueError(f"center must be finite, got ({cx}, {cy})")
    tw, th = (float(v) for v in target_size)
    if tw <= 0 or th <= 0:
        raise ValueError("target_size must be positive")
    if size_factor <= 1.0:
        raise ValueError("size_factor must be > 1")

    side = size_factor * math.sqrt(tw * th)
    scale = side / out_size
    mapping = AffineMap(scale=scale, x0=cx - 0.5 * side, y0=cy - 0.5 * side)

    xs = mapping.x0 + (np.arange(out_size) + 0.5) * scale
    ys = mapping.y0 + (np.arange(out_size) + 0.5) * scale
    h, w = image.shape
    jlo, jhi, tx = _sample_axis(xs, w)
    ilo, ihi, ty = _sample_axis(ys, h)

    top = image[np.ix_(ilo, jlo)] * (1 - tx) + image[np.ix_(ilo, jhi)] * tx
    bot = image[np.ix_(ihi, jlo)] * (1 - tx) + image[np.ix_(ihi, jhi)] * tx
    patch = top * (1 - ty)[:, None] + bot * ty[:, None]
    return patch, mapping


def featurize(patch: GrayImage, stride: int = 4, orientation_bins: int = 8) -> FeatureMap:
    """Handcrafted feature map: intensity, gradient energy, orientation bins.

    Each output cell averages its stride x stride pixel block. Gradients come
    from central differences; orientations are unsigned (folded to [0, pi))
    and soft-assigned to the two nearest of the circularly adjacent bins.
    """
    patch = np.asarray(patch, dtype=float)
    if patch.ndim != 2:
        raise ValueError(f"expected 2-D patch, got shape {patch.shape}")
    h, w = patch.shape
    if h % stride or w % stride:
        raise ValueError(f"stride {stride} must divide patch shape {patch.shape}")
    if orientation_bins < 2:
        raise ValueError("orientation_bins must be >= 2")

    dy, dx = np.gradient(patch)
    mag = np.hypot(dx, dy)
    theta = np.mod(np.arctan2(dy, dx), np.pi)

    pos = theta * (orientation_bins / np.pi)  # continuous bin coordinate
    bins = np.arange(orientation_bins, dtype=float)[:, None, None]
    dist = np.abs((pos[None] - bins + orientation_bins / 2) % orientation_bins
                  - orientation_bins / 2)
    hist = mag[None] * np.clip(1.0 - dist, 0.0, 1.0)

    channels = np.concatenate([patch[None], mag[None], hist], axis=0)
    c = channels.shape[0]
    pooled = channels.reshape(c, h // stride, stride, w // stride, stride).mean(axis=(2, 4))
    return FeatureMap(values=pooled, stride=stride, origin=(stride / 2.0, stride / 2.0))
