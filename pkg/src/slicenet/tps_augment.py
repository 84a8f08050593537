"""Thin-plate-spline and rigid data augmentation.

Each source image expands into ``N_t * N_r * N_d`` variants: the Cartesian
product of sampled translations, rotations and TPS deformations.  A TPS
deformation is fitted to random jitter of a regular control grid; its
displacement field moves image content forward, and images are produced by
inverse mapping (each output pixel ``p`` samples the input at ``p - d(p)``,
exact for rigid motion and close for small deformations) with bilinear
interpolation.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from .image import Image2D, bilinear_sample


class TpsFitError(ValueError):
    """The TPS system for a control configuration is singular or ill-conditioned."""


def tps_kernel(r):
    """Radial basis ``r**2 * ln(r)``, with the limit value 0 at ``r == 0``."""
    r = np.asarray(r, dtype=np.float64)
    if np.any(r < 0):
        raise ValueError("tps_kernel requires r >= 0")
    out = np.zeros_like(r)
    nz = r > 0
    out[nz] = r[nz] ** 2 * np.log(r[nz])
    return out if out.ndim else float(out)


def _kernel_sq(r2: np.ndarray) -> np.ndarray:
    """``tps_kernel`` evaluated from squared distances: ``r^2 ln r = r^2 ln(r^2) / 2``."""
    safe = np.where(r2 > 0, r2, 1.0)
    return 0.5 * r2 * np.log(safe)


@dataclass
class ControlGrid:
    """Regular ``rows x cols`` lattice spanning an image's full extent.

    Points are ``(x, y)`` = (column, row) pixel coordinates.
    """

    rows: int
    cols: int
    height: int
    width: int

    def __post_init__(self):
        if self.rows < 2 or self.cols < 2:
            raise ValueError("control grid needs at least 2x2 points")

    @property
    def points(self) -> np.ndarray:
        ys = np.linspace(0.0, self.height - 1, self.rows)
        xs = np.linspace(0.0, self.width - 1, self.cols)
        gx, gy = np.meshgrid(xs, ys)
        return np.column_stack([gx.ravel(), gy.ravel()])

    def __len__(self) -> int:
        return self.rows * self.cols


@dataclass
class TpsWarp:
    """Displacement field ``d(x) = a + A x + sum_i c_i phi(|x - w_i|)``.

    ``affine`` (2x2) and ``translation`` describe the full mapping
    ``x -> x + d(x)`` restricted to its polynomial part, so a zero warp has
    ``affine == I`` and ``translation == 0``.
    """

    points: np.ndarray  # (K, 2)
    coefficients: np.ndarray  # (K, 2), one column per displacement component
    affine: np.ndarray  # (2, 2)
    translation: np.ndarray  # (2,)

    def displacement(self, xy) -> np.ndarray:
        xy = np.asarray(xy, dtype=np.float64).reshape(-1, 2)
        dx = xy[:, 0:1] - self.points[:, 0]
        dy = xy[:, 1:2] - self.points[:, 1]
        u = _kernel_sq(dx * dx + dy * dy)
        linear = xy @ (self.affine - np.eye(2)).T + self.translation
        return linear + u @ self.coefficients

    def __call__(self, xy) -> np.ndarray:
        xy = np.asarray(xy, dtype=np.float64).reshape(-1, 2)
        return xy + self.displacement(xy)

    @classmethod
    def identity(cls, points) -> "TpsWarp":
        points = np.asarray(points, dtype=np.float64)
        return cls(points, np.zeros_like(points), np.eye(2), np.zeros(2))

    def is_identity(self) -> bool:
        return not self.coefficients.any() and np.array_equal(self.affine, np.eye(2)) and not self.translation.any()


MAX_CONDITION = 1e13


def fit_tps(source, displacements) -> TpsWarp:
    """Interpolating TPS through ``displacements`` at ``source`` points.

    Solves ``[[K, P], [P^T, 0]] [c; a] = [d; 0]`` for each displacement
    component, with ``K_ij = phi(|w_i - w_j|)`` and ``P = [1, x, y]``.  The
    zero block enforces ``sum c_i = 0`` and ``sum c_i w_i = 0``.
    """
    pts = np.asarray(source.points if isinstance(source, ControlGrid) else source, dtype=np.float64)
    d = np.asarray(displacements, dtype=np.float64)
    k = len(pts)
    if pts.shape != (k, 2) or d.shape != (k, 2):
        raise ValueError(f"need K x 2 points and displacements, got {pts.shape} and {d.shape}")
    if k < 4:
        raise TpsFitError(f"TPS needs at least 4 control points, got {k}")
    # Solve in centred unit-scale coordinates q = (w - m) / s for conditioning.  Since
    # phi(r / s) = phi(r) / s^2 - r^2 ln(s) / s^2 and the side conditions reduce
    # sum c_i |x - w_i|^2 to a constant, the interpolant maps back exactly.
    centre = pts.mean(axis=0)
    scale = float(np.sqrt(((pts - centre) ** 2).sum(axis=1).max()))
    if scale == 0.0:
        raise TpsFitError("TPS system is singular: all control points coincide")
    q = (pts - centre) / scale
    diff = q[:, None, :] - q[None, :, :]
    system = np.zeros((k + 3, k + 3))
    system[:k, :k] = tps_kernel(np.sqrt((diff**2).sum(axis=2)))
    system[:k, k] = 1.0
    system[:k, k + 1 :] = q
    system[k, :k] = 1.0
    system[k + 1 :, :k] = q.T
    cond = np.linalg.cond(system)
    if not np.isfinite(cond) or cond > MAX_CONDITION:
        raise TpsFitError(f"TPS system is singular (condition number {cond:.3g}); control points are degenerate")
    rhs = np.zeros((k + 3, 2))
    rhs[:k] = d
    sol = np.linalg.solve(system, rhs)
    linear = np.column_stack([sol[k + 1], sol[k + 2]]) / scale
    coeffs = sol[:k] / scale**2
    kappa = coeffs.T @ (pts**2).sum(axis=1)
    translation = sol[k] - linear @ centre - math.log(scale) * kappa
    return TpsWarp(pts, coeffs, np.eye(2) + linear, translation)


# -- sampling ----------------------------------------------------------------

def _pixel_grid(h: int, w: int) -> np.ndarray:
    gy, gx = np.mgrid[0:h, 0:w].astype(np.float64)
    return np.column_stack([gx.ravel(), gy.ravel()])


def default_fill(image: Image2D) -> float:
    """Background value for exposed regions: the image minimum (air in CT)."""
    return float(image.pixels.min())


def warp_image(image: Image2D, warp: TpsWarp, fill: float | None = None) -> Image2D:
    """Deform ``image`` so that content at ``x`` moves to ``x + d(x)``."""
    fill = default_fill(image) if fill is None else fill
    if warp.is_identity():
        return image.with_pixels(image.pixels.copy())
    h, w = image.pixels.shape
    xy = _pixel_grid(h, w)
    src = xy - warp.displacement(xy)
    out = bilinear_sample(image.pixels, src[:, 1], src[:, 0], fill)
    return image.with_pixels(out.reshape(h, w))


def _rigid_source_coords(xy: np.ndarray, h: int, w: int, tx: float, ty: float, angle_deg: float) -> np.ndarray:
    """Inverse of "rotate by ``angle`` about the centre, then translate by (tx, ty)"."""
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    theta = math.radians(angle_deg)
    c, s = math.cos(theta), math.sin(theta)
    u = xy[:, 0] - tx - cx
    v = xy[:, 1] - ty - cy
    return np.column_stack([c * u + s * v + cx, -s * u + c * v + cy])


def rigid_transform(image: Image2D, tx: float, ty: float, angle_deg: float, fill: float | None = None) -> Image2D:
    fill = default_fill(image) if fill is None else fill
    h, w = image.pixels.shape
    src = _rigid_source_coords(_pixel_grid(h, w), h, w, tx, ty, angle_deg)
    return image.with_pixels(bilinear_sample(image.pixels, src[:, 1], src[:, 0], fill).reshape(h, w))


def random_rigid(image: Image2D, max_translation: float, max_rotation: float, rng: np.random.Generator,
                 fill: float | None = None) -> Image2D:
    """Uniform translation in ``[-max_t, max_t]^2`` and rotation in ``[-max_r, max_r]`` degrees."""
    if max_translation < 0 or max_rotation < 0:
        raise ValueError("bounds must be non-negative")
    tx, ty = rng.uniform(-max_translation, max_translation, size=2)
    angle = rng.uniform(-max_rotation, max_rotation)
    return rigid_transform(image, tx, ty, angle, fill)


def random_tps(height: int, width: int, max_jitter: float, rng: np.random.Generator,
               grid: tuple[int, int] = (5, 5)) -> TpsWarp:
    cg = ControlGrid(grid[0], grid[1], height, width)
    disp = rng.uniform(-max_jitter, max_jitter, size=(len(cg), 2))
    return fit_tps(cg, disp)


# -- augmentation plans ------------------------------------------------------

# N_d per class reconstructed from the augmented/original count ratios with N_t = N_r = 2
CLINICAL_COUNTS = {"legs": 477, "pelvis": 104, "liver": 2684, "lungs": 590, "neck": 443}
CLINICAL_AUGMENTED = {"legs": 24804, "pelvis": 22048, "liver": 32208, "lungs": 25960, "neck": 23036}
CLINICAL_PRESET = {"legs": (2, 2, 13), "pelvis": (2, 2, 53), "liver": (2, 2, 3), "lungs": (2, 2, 11), "neck": (2, 2, 13)}


@dataclass
class AugmentationPlan:
    counts: dict[str, tuple[int, int, int]] = field(default_factory=lambda: dict(CLINICAL_PRESET))
    max_translation: float = 12.0
    max_rotation: float = 8.0
    max_control_jitter: float = 8.0
    grid: tuple[int, int] = (5, 5)
    seed: int = 0

    def __post_init__(self):
        for name, c in self.counts.items():
            if len(c) != 3 or min(c) < 1:
                raise ValueError(f"class {name}: counts (N_t, N_r, N_d) must all be >= 1, got {c}")
        if min(self.max_translation, self.max_rotation, self.max_control_jitter) < 0:
            raise ValueError("augmentation bounds must be non-negative")

    def multiplier(self, name: str) -> int:
        """``N_t * N_r * N_d``; classes without an entry are copied through once."""
        nt, nr, nd = self.counts.get(name, (1, 1, 1))
        return nt * nr * nd

    def expected_count(self, name: str, n: int) -> int:
        return n * self.multiplier(name)

    def bounds(self) -> "Bounds":
        return Bounds(self.max_translation, self.max_rotation, self.max_control_jitter, self.grid)


@dataclass(frozen=True)
class Bounds:
    max_translation: float = 12.0
    max_rotation: float = 8.0
    max_control_jitter: float = 8.0
    grid: tuple[int, int] = (5, 5)


@dataclass(frozen=True)
class Provenance:
    source_id: str
    variant: int
    tx: float
    ty: float
    angle: float
    grid_seed: int
    seed: int

    def transform_text(self) -> str:
        return f"({self.tx!r},{self.ty!r},{self.angle!r},{self.grid_seed})"


def _stream_seed(seed: int, source_id: str, kind: int, index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed & 0xFFFFFFFFFFFFFFFF, zlib.crc32(source_id.encode()), kind, index])


def _grid_seed(seed: int, source_id: str, index: int) -> int:
    return int(_stream_seed(seed, source_id, 2, index).generate_state(1, np.uint64)[0] >> np.uint64(1))


def augment_image(image: Image2D, counts: tuple[int, int, int], bounds: Bounds, seed: int,
                  source_id: str | None = None, fill: float | None = None) -> Iterator[tuple[Image2D, Provenance]]:
    """Yield the ``N_t * N_r * N_d`` variants of one image, translation-major."""
    nt, nr, nd = counts
    sid = image.id if source_id is None else source_id
    fill = default_fill(image) if fill is None else fill
    h, w = image.pixels.shape
    shifts = [np.random.default_rng(_stream_seed(seed, sid, 0, i)).uniform(-bounds.max_translation, bounds.max_translation, 2)
              for i in range(nt)]
    angles = [float(np.random.default_rng(_stream_seed(seed, sid, 1, i)).uniform(-bounds.max_rotation, bounds.max_rotation))
              for i in range(nr)]
    warps = []
    for i in range(nd):
        gseed = _grid_seed(seed, sid, i)
        warps.append((gseed, random_tps(h, w, bounds.max_control_jitter, np.random.default_rng(gseed), bounds.grid)))
    xy = _pixel_grid(h, w)
    variant = 0
    for tx, ty in shifts:
        for angle in angles:
            rigid_src = _rigid_source_coords(xy, h, w, float(tx), float(ty), angle)
            for gseed, warp in warps:
                src = rigid_src if warp.is_identity() else rigid_src - warp.displacement(rigid_src)
                pixels = bilinear_sample(image.pixels, src[:, 1], src[:, 0], fill).reshape(h, w)
                prov = Provenance(sid, variant, float(tx), float(ty), angle, gseed, seed)
                yield Image2D(pixels, image.spacing, f"{sid}_aug{variant}", {**image.meta, "provenance": prov}), prov
                variant += 1


def augment_class(images: Sequence[Image2D], counts: tuple[int, int, int], bounds: Bounds = Bounds(),
                  seed: int = 0, fill: float | None = None) -> list[tuple[Image2D, Provenance]]:
    """All variants for one class: exactly ``len(images) * N_t * N_r * N_d`` outputs."""
    if min(counts) < 1:
        raise ValueError(f"counts must be >= 1, got {counts}")
    out = []
    for i, img in enumerate(images):
        out.extend(augment_image(img, counts, bounds, seed, img.id or str(i), fill))
    return out
