"""Slice-by-slice classification of 3D volumes into per-class probability profiles."""

from __future__ import annotations

import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import convnet as C
from .dataset import generate_phantoms, preprocess
from .image import Image2D

VOLUME_MAGIC = b"SLIVOL1\0"
HEADER = struct.Struct("<8s3I3f")  # 32 bytes


class VolumeFormatError(ValueError):
    pass


class SliceError(RuntimeError):
    def __init__(self, index: int, cause: Exception):
        self.index = index
        super().__init__(f"slice {index}: {cause}")


@dataclass(eq=False)
class Volume3D:
    """Voxels stored as ``(nz, ny, nx)`` so the flat order is x-fastest."""

    voxels: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)  # (sx, sy, sz) in mm

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels)
        if self.voxels.ndim != 3 or min(self.voxels.shape) < 1:
            raise ValueError(f"volume must be a non-empty 3D array, got shape {self.voxels.shape}")
        if min(self.spacing) <= 0:
            raise ValueError(f"spacing must be positive, got {self.spacing}")
        self.spacing = tuple(float(s) for s in self.spacing)

    @property
    def dims(self) -> tuple[int, int, int]:
        nz, ny, nx = self.voxels.shape
        return nx, ny, nz

    def axial_slice(self, z: int) -> Image2D:
        return Image2D(self.voxels[z], (self.spacing[1], self.spacing[0]), id=f"z{z:04d}")


def volume_to_bytes(volume: Volume3D) -> bytes:
    nx, ny, nz = volume.dims
    header = HEADER.pack(VOLUME_MAGIC, nx, ny, nz, *volume.spacing)
    return header + np.ascontiguousarray(volume.voxels, dtype="<f4").tobytes()


def save_volume(volume: Volume3D, path) -> None:
    Path(path).write_bytes(volume_to_bytes(volume))


def load_volume(path) -> Volume3D:
    data = Path(path).read_bytes()
    if len(data) < HEADER.size:
        raise VolumeFormatError(f"{path}: file has {len(data)} bytes, shorter than the {HEADER.size}-byte header")
    magic, nx, ny, nz, sx, sy, sz = HEADER.unpack_from(data)
    if magic != VOLUME_MAGIC:
        raise VolumeFormatError(f"{path}: bad magic {magic!r}")
    expected = 4 * nx * ny * nz
    actual = len(data) - HEADER.size
    if actual != expected:
        raise VolumeFormatError(f"{path}: header declares {nx}x{ny}x{nz} voxels = {expected} bytes, payload has {actual}")
    voxels = np.frombuffer(data, dtype="<f4", offset=HEADER.size).reshape(nz, ny, nx).astype(np.float32)
    return Volume3D(voxels, (sx, sy, sz))


@dataclass
class SliceProfile:
    probs: np.ndarray  # (nz, C)
    class_names: tuple[str, ...]
    z_spacing: float

    @property
    def z_mm(self) -> np.ndarray:
        return np.arange(len(self.probs)) * self.z_spacing

    def argmax(self) -> np.ndarray:
        return self.probs.argmax(axis=1)

    def column(self, name: str) -> np.ndarray:
        return self.probs[:, self.class_names.index(name)]


def classify_slice(model: C.ConvNetModel, volume: Volume3D, z: int) -> np.ndarray:
    size = model.input_shape[1]
    try:
        return C.predict(model, preprocess(volume.axial_slice(z), size)).probs
    except Exception as exc:
        raise SliceError(z, exc) from exc


def profile(model: C.ConvNetModel, volume: Volume3D, threads: int | None = None,
            order: Sequence[int] | None = None) -> SliceProfile:
    """Classify every axial slice independently; rows come back in z order.

    ``order`` only changes the processing order (used to check independence).
    """
    nz = volume.voxels.shape[0]
    zs = list(range(nz)) if order is None else list(order)
    if sorted(zs) != list(range(nz)):
        raise ValueError("order must be a permutation of the slice indices")
    if threads is None or threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(lambda z: classify_slice(model, volume, z), zs))
    else:
        rows = [classify_slice(model, volume, z) for z in zs]
    probs = np.empty((nz, model.num_classes))
    for z, row in zip(zs, rows):
        probs[z] = row
    return SliceProfile(probs, model.class_names, volume.spacing[2])


def profile_to_csv(prof: SliceProfile) -> str:
    lines = ["z_mm," + ",".join(f"p_{n}" for n in prof.class_names)]
    for z, row in zip(prof.z_mm, prof.probs):
        lines.append(f"{z:.3f}," + ",".join(f"{p:.6f}" for p in row))
    return "\n".join(lines) + "\n"


def emit_profile(prof: SliceProfile, path) -> Path:
    path = Path(path)
    try:
        path.write_text(profile_to_csv(prof), encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot write profile {path}: {exc}") from exc
    return path


def read_profile_csv(path) -> SliceProfile:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    names = tuple(h[2:] for h in lines[0].split(",")[1:])
    rows = np.array([[float(v) for v in line.split(",")] for line in lines[1:]])
    dz = float(rows[1, 0] - rows[0, 0]) if len(rows) > 1 else 1.0
    return SliceProfile(rows[:, 1:], names, dz)


def stacked_phantom_volume(segments: Sequence[tuple[str, int]], blend: int = 0, seed: int = 0,
                           size: int = 256, spacing=(0.98, 0.98, 1.5)) -> tuple[Volume3D, list[str | None]]:
    """Stack phantom slices class by class, with ``blend`` linearly mixed slices between segments.

    Returns the volume and a per-slice label (None inside blend zones).
    """
    slices: list[np.ndarray] = []
    labels: list[str | None] = []
    prev_last = None
    for k, (name, count) in enumerate(segments):
        imgs = [img.pixels for img, _ in generate_phantoms(count, seed + 7919 * k, size, (name,))]
        if prev_last is not None and blend:
            for b in range(1, blend + 1):
                a = b / (blend + 1)
                slices.append((1 - a) * prev_last + a * imgs[0])
                labels.append(None)
        slices.extend(imgs)
        labels.extend([name] * count)
        prev_last = imgs[-1]
    return Volume3D(np.stack(slices).astype(np.float32), spacing), labels
