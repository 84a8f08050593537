"""Key-image ingestion: manifests, label mining, duplication, preprocessing, splits.

Also holds the on-disk image formats and the procedural phantom corpus that
stands in for clinical key-images.
"""

from __future__ import annotations

import logging
import re
import struct
from collections import defaultdict
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .image import Image2D, resize_bilinear

log = logging.getLogger(__name__)

DEFAULT_CLASSES = ("neck", "lungs", "liver", "pelvis", "legs")
TARGET_SIZE = 256


class ManifestError(ValueError):
    pass


class LabelError(ValueError):
    pass


class SplitError(ValueError):
    pass


# -- class sets --------------------------------------------------------------


@dataclass
class ClassSet:
    names: tuple[str, ...] = DEFAULT_CLASSES
    keywords: dict[str, str] = field(default_factory=dict)  # upper-case keyword -> class

    def __post_init__(self):
        self.names = tuple(self.names)
        if len(set(self.names)) != len(self.names):
            raise ValueError(f"class names must be unique: {self.names}")
        self.keywords = {k.upper(): v for k, v in self.keywords.items()}
        for k, v in self.keywords.items():
            if v not in self.names:
                raise ValueError(f"keyword {k!r} maps to unknown class {v!r}")

    @classmethod
    def from_table(cls, text: str, names: Sequence[str] | None = None) -> "ClassSet":
        keywords: dict[str, str] = {}
        order: list[str] = []
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = raw.rstrip("\n").split("\t")
            if len(parts) != 2 or not parts[1].strip():
                raise ValueError(f"keyword table line {lineno}: expected 'class<TAB>keyword', got {raw!r}")
            name, kw = parts[0].strip(), parts[1].strip().upper()
            if kw in keywords and keywords[kw] != name:
                raise ValueError(f"keyword table line {lineno}: {kw!r} already maps to {keywords[kw]!r}")
            keywords[kw] = name
            if name not in order:
                order.append(name)
        return cls(tuple(names) if names else tuple(order), keywords)

    @classmethod
    def load(cls, path=None, names: Sequence[str] | None = None) -> "ClassSet":
        if path is None:
            text = resources.files("slicenet").joinpath("data/keywords.tsv").read_text(encoding="utf-8")
            return cls.from_table(text, names or DEFAULT_CLASSES)
        return cls.from_table(Path(path).read_text(encoding="utf-8"), names)

    def index(self, name: str) -> int:
        return self.names.index(name)


def default_class_set() -> ClassSet:
    return ClassSet.load()


# -- manifests ---------------------------------------------------------------

MANIFEST_FIELDS = ("id", "path", "study_description", "body_part_examined", "label_override")
EXTRA_KEYS = ("source", "transform", "seed")


@dataclass
class KeyImageRecord:
    id: str
    path: str
    study_description: str = ""
    body_part_examined: str = ""
    label_override: str | None = None
    assigned_labels: list[str] = field(default_factory=list)
    source_id: str = ""
    extra: dict[str, str] = field(default_factory=dict)
    line: int = 0

    def __post_init__(self):
        if not self.source_id:
            self.source_id = self.extra.get("source", self.id)

    def to_line(self) -> str:
        cols = [self.id, self.path, self.study_description, self.body_part_examined, self.label_override or ""]
        cols += [f"{k}={self.extra[k]}" for k in EXTRA_KEYS if k in self.extra]
        return "\t".join(cols)


@dataclass
class Manifest:
    records: list[KeyImageRecord]
    ignored_fields: int = 0

    def __iter__(self):
        return iter(self.records)

    def __len__(self):
        return len(self.records)


def parse_manifest_text(text: str, source: str = "<manifest>") -> Manifest:
    records: list[KeyImageRecord] = []
    seen: dict[str, int] = {}
    ignored = 0
    for lineno, raw in enumerate(text.splitlines(), 1):
        if not raw.strip() or raw.lstrip().startswith("#"):
            continue
        cols = raw.split("\t")
        if len(cols) < 4:
            missing = MANIFEST_FIELDS[len(cols)]
            raise ManifestError(f"{source}:{lineno}: missing field {missing!r} (got {len(cols)} tab-separated fields)")
        rid, path = cols[0].strip(), cols[1].strip()
        if not rid:
            raise ManifestError(f"{source}:{lineno}: empty field 'id'")
        if not path:
            raise ManifestError(f"{source}:{lineno}: empty field 'path'")
        if rid in seen:
            raise ManifestError(f"{source}:{lineno}: duplicate id {rid!r} (first defined on line {seen[rid]})")
        seen[rid] = lineno
        override = cols[4].strip() if len(cols) > 4 and cols[4].strip() else None
        extra = {}
        for item in cols[5:]:
            key, sep, value = item.partition("=")
            if sep and key.strip() in EXTRA_KEYS:
                extra[key.strip()] = value.strip()
            elif item.strip():
                ignored += 1
        records.append(KeyImageRecord(rid, path, cols[2].strip(), cols[3].strip(), override, extra=extra, line=lineno))
    if ignored:
        log.warning("%s: ignored %d unknown manifest field(s)", source, ignored)
    return Manifest(records, ignored)


def parse_manifest(path) -> Manifest:
    path = Path(path)
    return parse_manifest_text(path.read_text(encoding="utf-8"), str(path))


def write_manifest(records: Iterable[KeyImageRecord], path, header: str | None = None) -> None:
    lines = ["# " + "\t".join(MANIFEST_FIELDS)]
    if header:
        lines += ["# " + h for h in header.splitlines()]
    lines += [r.to_line() for r in records]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# -- label mining ------------------------------------------------------------


def mine_labels(record: KeyImageRecord, class_set: ClassSet) -> list[str]:
    """Labels for one record: the manual override if present, else keyword matches on both tags.

    Returns labels in class-set order; an empty list means unlabelable.
    """
    if record.label_override:
        if record.label_override not in class_set.names:
            raise LabelError(f"record {record.id!r}: override {record.label_override!r} is not a known class")
        return [record.label_override]
    if not class_set.keywords:
        raise LabelError("class set has no keywords")
    text = f"{record.study_description} {record.body_part_examined}".upper()
    hits = {cls for kw, cls in class_set.keywords.items() if kw in text}
    return [n for n in class_set.names if n in hits]


def mine_all(records: Iterable[KeyImageRecord], class_set: ClassSet):
    """Assign labels in place; returns ``(labeled, unlabelable)``."""
    labeled, unlabelable = [], []
    for r in records:
        r.assigned_labels = mine_labels(r, class_set)
        (labeled if r.assigned_labels else unlabelable).append(r)
    return labeled, unlabelable


@dataclass
class Entry:
    """One training/test sample: a (possibly duplicated) image with a single label."""

    id: str
    source_id: str
    label: str
    path: str = ""
    image: Image2D | None = None


def duplicate_multiclass(records: Iterable[KeyImageRecord]) -> list[Entry]:
    out = []
    for r in records:
        if not r.assigned_labels:
            raise LabelError(f"record {r.id!r} has no labels; mine labels first")
        multi = len(r.assigned_labels) > 1
        for label in r.assigned_labels:
            out.append(Entry(f"{r.id}#{label}" if multi else r.id, r.source_id, label, r.path))
    return out


# -- preprocessing -----------------------------------------------------------


def standardize(pixels: np.ndarray) -> np.ndarray:
    pixels = np.asarray(pixels, dtype=np.float64)
    std = pixels.std()
    if std == 0.0 or not np.isfinite(std):
        return np.zeros_like(pixels)
    return (pixels - pixels.mean()) / std


def preprocess(image: Image2D, size: int = TARGET_SIZE) -> Image2D:
    """Bilinear resize to ``size x size`` then per-image zero-mean, unit-variance."""
    resized = resize_bilinear(image.pixels, size, size)
    spacing = (image.spacing[0] * image.height / size, image.spacing[1] * image.width / size)
    return Image2D(standardize(resized), spacing, image.id, dict(image.meta))


# -- splitting ---------------------------------------------------------------


@dataclass
class SplitDataset:
    train: list[Entry]
    test: list[Entry]
    ratio: float
    seed: int

    def arrays(self, class_names: Sequence[str], which: str = "train"):
        entries = self.train if which == "train" else self.test
        return to_arrays(entries, class_names)


def to_arrays(entries: Sequence[Entry], class_names: Sequence[str]):
    """Stack entry images into ``(x[N,1,H,W], y[N])``."""
    if not entries:
        raise ValueError("no entries")
    x = np.stack([e.image.pixels for e in entries])[:, None]
    y = np.array([list(class_names).index(e.label) for e in entries], dtype=np.intp)
    return x, y


def split(entries: Sequence[Entry], ratio: float = 0.8, seed: int = 0,
          class_names: Sequence[str] | None = None) -> SplitDataset:
    """Stratified split at the source-id level.

    Each source id is stratified under its first label in class order, and
    all entries of a source id land on the same side.
    """
    if not 0.0 < ratio < 1.0:
        raise SplitError(f"ratio must be in (0, 1), got {ratio}")
    labels_by_source: dict[str, list[str]] = defaultdict(list)
    for e in entries:
        labels_by_source[e.source_id].append(e.label)
    names = list(class_names) if class_names else sorted({e.label for e in entries})
    strata: dict[str, list[str]] = defaultdict(list)
    for sid in sorted(labels_by_source):
        primary = min(labels_by_source[sid], key=lambda n: names.index(n) if n in names else len(names))
        strata[primary].append(sid)
    rng = np.random.default_rng(seed)
    train_ids: set[str] = set()
    for name in names:
        ids = strata.get(name, [])
        if not ids:
            continue
        if len(ids) < 2:
            raise SplitError(f"class {name!r} has {len(ids)} source id(s); need >= 2 to stratify")
        n_train = min(max(int(round(ratio * len(ids))), 1), len(ids) - 1)
        order = rng.permutation(len(ids))
        train_ids.update(ids[i] for i in order[:n_train])
    train = [e for e in entries if e.source_id in train_ids]
    test = [e for e in entries if e.source_id not in train_ids]
    return SplitDataset(train, test, ratio, seed)


# -- image files -------------------------------------------------------------

PGM_OFFSET = 32768
SLIMG_MAGIC = b"SLIMG1\0\0"


class ImageFormatError(ValueError):
    pass


def write_pgm16(image: Image2D, path) -> None:
    """16-bit big-endian binary PGM; stored value = round(raw) + 32768, clipped to [0, 65535]."""
    stored = np.clip(np.rint(image.pixels) + PGM_OFFSET, 0, 65535).astype(">u2")
    header = f"P5\n{image.width} {image.height}\n65535\n".encode("ascii")
    Path(path).write_bytes(header + stored.tobytes())


_PGM_HEADER = re.compile(rb"P5\s+(?:#[^\n]*\s+)*(\d+)\s+(?:#[^\n]*\s+)*(\d+)\s+(?:#[^\n]*\s+)*(\d+)\s")


def read_pgm16(path) -> Image2D:
    data = Path(path).read_bytes()
    m = _PGM_HEADER.match(data)
    if not m:
        raise ImageFormatError(f"{path}: not a binary PGM")
    w, h, maxval = (int(g) for g in m.groups())
    if maxval != 65535:
        raise ImageFormatError(f"{path}: expected maxval 65535, got {maxval}")
    payload = data[m.end():]
    if len(payload) != 2 * w * h:
        raise ImageFormatError(f"{path}: expected {2 * w * h} payload bytes, got {len(payload)}")
    raw = np.frombuffer(payload, dtype=">u2").astype(np.float64) - PGM_OFFSET
    return Image2D(raw.reshape(h, w), id=Path(path).stem)


def write_slimg(image: Image2D, path) -> None:
    header = SLIMG_MAGIC + struct.pack("<II", image.width, image.height)
    Path(path).write_bytes(header + image.pixels.astype("<f4").tobytes())


def read_slimg(path) -> Image2D:
    data = Path(path).read_bytes()
    if len(data) < 16 or data[:8] != SLIMG_MAGIC:
        raise ImageFormatError(f"{path}: bad SLIMG header")
    w, h = struct.unpack_from("<II", data, 8)
    if len(data) - 16 != 4 * w * h:
        raise ImageFormatError(f"{path}: expected {4 * w * h} payload bytes, got {len(data) - 16}")
    pixels = np.frombuffer(data, dtype="<f4", offset=16).astype(np.float64)
    return Image2D(pixels.reshape(h, w), id=Path(path).stem)


def read_image(path) -> Image2D:
    with open(path, "rb") as fh:
        head = fh.read(8)
    if head == SLIMG_MAGIC:
        return read_slimg(path)
    if head[:2] == b"P5":
        return read_pgm16(path)
    raise ImageFormatError(f"{path}: unrecognised image format")


def write_image(image: Image2D, path) -> None:
    if str(path).endswith(".pgm"):
        write_pgm16(image, path)
    else:
        write_slimg(image, path)


def load_entries(entries: Sequence[Entry], root=".", size: int = TARGET_SIZE) -> list[Entry]:
    """Read and preprocess each entry's image (cached per path)."""
    cache: dict[str, Image2D] = {}
    root = Path(root)
    for e in entries:
        if e.path not in cache:
            cache[e.path] = preprocess(read_image(root / e.path), size)
        img = cache[e.path]
        e.image = Image2D(img.pixels, img.spacing, e.id, img.meta)
    return list(entries)


# -- phantoms ----------------------------------------------------------------

AIR, FAT, SOFT, LIVER_HU, LUNG_HU, BONE = -1000.0, -90.0, 40.0, 70.0, -820.0, 650.0
PHANTOM_TAGS = {"neck": "NECK", "lungs": "LUNG", "liver": "LIVER", "pelvis": "PELVIS", "legs": "LEG"}


def _ellipse(yy, xx, cy, cx, ry, rx, angle=0.0):
    c, s = np.cos(angle), np.sin(angle)
    u = (xx - cx) * c + (yy - cy) * s
    v = -(xx - cx) * s + (yy - cy) * c
    return (u / rx) ** 2 + (v / ry) ** 2 <= 1.0


def phantom_image(label: str, rng: np.random.Generator, size: int = TARGET_SIZE, noise: float = 25.0) -> np.ndarray:
    """One procedurally generated axial "slice" of the given anatomy family."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size
    img = np.full((size, size), AIR)
    j = lambda a: rng.uniform(-a, a)  # noqa: E731
    cy, cx = 0.5 + j(0.07), 0.5 + j(0.07)
    scale = 1.0 + j(0.15)
    tilt = j(0.15)
    if label == "neck":
        ry, rx = 0.2 * scale, 0.17 * scale
        img[_ellipse(yy, xx, cy, cx, ry, rx, tilt)] = SOFT
        img[_ellipse(yy, xx, cy + 0.09 * scale, cx, 0.045 * scale, 0.05 * scale)] = BONE
        img[_ellipse(yy, xx, cy - 0.09 * scale, cx, 0.03 * scale, 0.035 * scale)] = AIR
    elif label == "legs":
        gap = 0.2 * scale + j(0.02)
        r = 0.14 * scale
        for side in (-1, 1):
            lx = cx + side * gap
            img[_ellipse(yy, xx, cy, lx, r * (1 + j(0.1)), r * (1 + j(0.1)))] = SOFT
            img[_ellipse(yy, xx, cy + j(0.02), lx + j(0.02), 0.035 * scale, 0.035 * scale)] = BONE
    else:
        ry, rx = 0.3 * scale, 0.42 * scale
        body = _ellipse(yy, xx, cy, cx, ry, rx, tilt)
        img[body] = FAT
        img[_ellipse(yy, xx, cy, cx, ry * 0.88, rx * 0.9, tilt)] = SOFT
        spine = _ellipse(yy, xx, cy + ry * 0.65, cx, 0.04 * scale, 0.045 * scale)
        if label == "lungs":
            for side in (-1, 1):
                img[_ellipse(yy, xx, cy - 0.02, cx + side * rx * 0.45, ry * 0.62, rx * 0.33, side * 0.2 + tilt)] = LUNG_HU
        elif label == "liver":
            img[_ellipse(yy, xx, cy - 0.02, cx - rx * 0.35, ry * 0.62, rx * 0.45, 0.3 + tilt)] = LIVER_HU + 80
        elif label == "pelvis":
            ring = _ellipse(yy, xx, cy, cx, ry * 0.7, rx * 0.7) & ~_ellipse(yy, xx, cy, cx, ry * 0.55, rx * 0.57)
            img[ring] = BONE
        else:
            raise ValueError(f"unknown phantom class {label!r}")
        img[spine] = BONE
    return img + rng.normal(0.0, noise, size=img.shape)


def generate_phantoms(per_class: int, seed: int = 0, size: int = TARGET_SIZE,
                      classes: Sequence[str] = DEFAULT_CLASSES) -> list[tuple[Image2D, str]]:
    """``per_class`` images for each class, class-major; image ``i`` of class ``c`` is seeded by (seed, c, i)."""
    if per_class < 1:
        raise ValueError(f"per_class must be >= 1, got {per_class}")
    out = []
    for ci, label in enumerate(classes):
        for i in range(per_class):
            rng = np.random.default_rng([seed, ci, i])
            pixels = phantom_image(label, rng, size)
            out.append((Image2D(pixels, (0.98 * 512 / size,) * 2, f"{label}_{i:04d}"), label))
    return out


def phantom_entries(per_class: int, seed: int = 0, size: int = TARGET_SIZE,
                    classes: Sequence[str] = DEFAULT_CLASSES) -> list[Entry]:
    """Preprocessed phantom corpus as entries ready for :func:`split`."""
    return [Entry(img.id, img.id, label, image=preprocess(img, size))
            for img, label in generate_phantoms(per_class, seed, size, classes)]
