"""The 2D image type shared by every stage of the pipeline."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(eq=False)
class Image2D:
    """Single-channel intensity grid with pixel spacing in mm.

    ``pixels`` is a float64 array of shape ``(height, width)``.
    """

    pixels: np.ndarray
    spacing: tuple[float, float] = (1.0, 1.0)
    id: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.pixels = np.ascontiguousarray(self.pixels, dtype=np.float64)
        if self.pixels.ndim != 2 or min(self.pixels.shape) < 1:
            raise ValueError(f"image pixels must be a non-empty 2D grid, got shape {self.pixels.shape}")
        self.spacing = (float(self.spacing[0]), float(self.spacing[1]))
        if min(self.spacing) <= 0:
            raise ValueError(f"spacing must be positive, got {self.spacing}")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    def with_pixels(self, pixels: np.ndarray, **meta) -> "Image2D":
        return Image2D(pixels, self.spacing, self.id, {**self.meta, **meta})


_EDGE_TOL = 1e-6


def bilinear_sample(pixels: np.ndarray, ys: np.ndarray, xs: np.ndarray, fill: float) -> np.ndarray:
    """Sample ``pixels`` at fractional (row, col) coordinates; outside the grid gives ``fill``.

    Coordinates within ``1e-6`` of the border are snapped onto it so that
    round-off never turns an edge pixel into fill.
    """
    h, w = pixels.shape
    ys = np.asarray(ys, dtype=np.float64)
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.where((ys < 0) & (ys > -_EDGE_TOL), 0.0, ys)
    ys = np.where((ys > h - 1) & (ys < h - 1 + _EDGE_TOL), h - 1.0, ys)
    xs = np.where((xs < 0) & (xs > -_EDGE_TOL), 0.0, xs)
    xs = np.where((xs > w - 1) & (xs < w - 1 + _EDGE_TOL), w - 1.0, xs)
    inside = (ys >= 0) & (ys <= h - 1) & (xs >= 0) & (xs <= w - 1)
    yc = np.where(inside, ys, 0.0)
    xc = np.where(inside, xs, 0.0)
    y0 = np.floor(yc).astype(np.intp)
    x0 = np.floor(xc).astype(np.intp)
    fy = yc - y0
    fx = xc - x0
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    top = pixels[y0, x0] * (1 - fx) + pixels[y0, x1] * fx
    bottom = pixels[y1, x0] * (1 - fx) + pixels[y1, x1] * fx
    out = top * (1 - fy) + bottom * fy
    return np.where(inside, out, fill)


def resize_bilinear(pixels: np.ndarray, height: int, width: int) -> np.ndarray:
    """Corner-aligned bilinear resize; same-size input is returned unchanged."""
    h, w = pixels.shape
    if (h, w) == (height, width):
        return np.array(pixels, dtype=np.float64)
    ys = np.linspace(0.0, h - 1, height) if height > 1 else np.array([(h - 1) / 2.0])
    xs = np.linspace(0.0, w - 1, width) if width > 1 else np.array([(w - 1) / 2.0])
    gy, gx = np.meshgrid(ys, xs, indexing="ij")
    return bilinear_sample(pixels, gy.ravel(), gx.ravel(), 0.0).reshape(height, width)
