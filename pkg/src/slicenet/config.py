"""Run configuration: a flat ``key = value`` file with ``[section]`` headers.

Every section maps onto a dataclass; unknown sections and keys are rejected
so that typos fail loudly.  Per-class augmentation counts live in the
``[augment.counts]`` section as ``class = N_t,N_r,N_d``.  Relative paths are
resolved against the directory holding the config file.
"""

from __future__ import annotations

import configparser
import hashlib
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .convnet import ARCHITECTURES, DEFAULT_CLASSES, TrainConfig
from .tps_augment import CLINICAL_PRESET, AugmentationPlan


class ConfigError(ValueError):
    pass


@dataclass
class ClassesSection:
    names: tuple[str, ...] = DEFAULT_CLASSES
    keywords: str = ""  # keyword table path; empty means the built-in table


@dataclass
class CorpusSection:
    manifest: str = "manifest.tsv"
    root: str = "."
    size: int = 256


@dataclass
class AugmentSection:
    output: str = "augmented"
    max_translation: float = 12.0
    max_rotation: float = 8.0
    max_control_jitter: float = 8.0
    grid: tuple[int, ...] = (5, 5)
    seed: int = 0
    counts: dict[str, tuple[int, int, int]] = field(default_factory=lambda: dict(CLINICAL_PRESET))


@dataclass
class NetworkSection:
    architecture: str = "scaled"
    seed: int = 0


@dataclass
class TrainSection:
    use_augmented: bool = False
    learning_rate: float = 0.01
    momentum: float = 0.9
    batch_size: int = 32
    epochs: int = 30
    weight_decay: float = 5e-4
    lr_decay_factor: float = 0.1
    lr_decay_interval: int = 10
    seed: int = 0


@dataclass
class SplitSection:
    ratio: float = 0.8
    seed: int = 0


@dataclass
class OutputSection:
    model: str = "model.slicenet"
    reports: str = "reports"


@dataclass
class RunConfig:
    classes: ClassesSection = field(default_factory=ClassesSection)
    corpus: CorpusSection = field(default_factory=CorpusSection)
    augment: AugmentSection = field(default_factory=AugmentSection)
    network: NetworkSection = field(default_factory=NetworkSection)
    train: TrainSection = field(default_factory=TrainSection)
    split: SplitSection = field(default_factory=SplitSection)
    output: OutputSection = field(default_factory=OutputSection)
    base_dir: Path = field(default=Path("."), compare=False)

    def path(self, value: str) -> Path:
        p = Path(value)
        return p if p.is_absolute() else self.base_dir / p

    def train_config(self) -> TrainConfig:
        t = self.train
        return TrainConfig(t.learning_rate, t.momentum, t.batch_size, t.epochs, t.weight_decay,
                           t.lr_decay_factor, t.lr_decay_interval, t.seed)

    def augmentation_plan(self) -> AugmentationPlan:
        a = self.augment
        return AugmentationPlan(dict(a.counts), a.max_translation, a.max_rotation, a.max_control_jitter,
                                tuple(a.grid), a.seed)

    def digest(self) -> str:
        return hashlib.sha256(serialize(self).encode("utf-8")).hexdigest()[:16]


SECTIONS = ("classes", "corpus", "augment", "network", "train", "split", "output")
COUNTS_SECTION = "augment.counts"


def _parse_value(text: str, current, where: str):
    try:
        if isinstance(current, bool):
            low = text.strip().lower()
            if low not in ("true", "false", "yes", "no", "1", "0"):
                raise ValueError(f"expected a boolean, got {text!r}")
            return low in ("true", "yes", "1")
        if isinstance(current, int):
            return int(text)
        if isinstance(current, float):
            return float(text)
        if isinstance(current, tuple):
            items = [s.strip() for s in text.split(",") if s.strip()]
            if current and isinstance(current[0], int):
                return tuple(int(s) for s in items)
            return tuple(items)
        return text.strip()
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse(text: str, source: str = "<config>", base_dir=None) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, delimiters=("=",), comment_prefixes=("#", ";"),
                                       inline_comment_prefixes=None, empty_lines_in_values=False)
    parser.optionxform = str
    try:
        parser.read_string(text, source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from None
    if parser.defaults():
        raise ConfigError(f"{source}: unknown section [{parser.default_section}]")
    cfg = RunConfig(base_dir=Path(base_dir) if base_dir is not None else Path("."))
    for section in parser.sections():
        if section == COUNTS_SECTION:
            continue
        if section not in SECTIONS:
            raise ConfigError(f"{source}: unknown section [{section}]")
        obj = getattr(cfg, section)
        known = {f.name for f in fields(obj) if f.name != "counts"}
        for key, raw in parser.items(section):
            if key not in known:
                raise ConfigError(f"{source}: unknown key {key!r} in [{section}]")
            setattr(obj, key, _parse_value(raw, getattr(obj, key), f"{source}: [{section}] {key}"))
    if parser.has_section(COUNTS_SECTION):
        counts = {}
        for key, raw in parser.items(COUNTS_SECTION):
            value = _parse_value(raw, (1, 1, 1), f"{source}: [{COUNTS_SECTION}] {key}")
            if len(value) != 3 or min(value) < 1:
                raise ConfigError(f"{source}: [{COUNTS_SECTION}] {key}: expected N_t,N_r,N_d >= 1, got {raw!r}")
            counts[key] = value
        cfg.augment.counts = counts
    validate(cfg, source)
    return cfg


def validate(cfg: RunConfig, source: str = "<config>") -> None:
    names = cfg.classes.names
    if not names or len(set(names)) != len(names):
        raise ConfigError(f"{source}: [classes] names must be non-empty and unique, got {names}")
    unknown = sorted(set(cfg.augment.counts) - set(names))
    if unknown:
        raise ConfigError(f"{source}: [{COUNTS_SECTION}] names unknown classes {unknown}")
    if cfg.network.architecture not in ARCHITECTURES:
        raise ConfigError(f"{source}: [network] architecture must be one of {sorted(ARCHITECTURES)}")
    if len(cfg.augment.grid) != 2 or min(cfg.augment.grid) < 2:
        raise ConfigError(f"{source}: [augment] grid must be two values >= 2")
    if not 0.0 < cfg.split.ratio < 1.0:
        raise ConfigError(f"{source}: [split] ratio must lie in (0, 1)")
    if cfg.corpus.size < 1:
        raise ConfigError(f"{source}: [corpus] size must be positive")
    for section, key in (("corpus", "manifest"), ("output", "model"), ("output", "reports"), ("augment", "output")):
        if not getattr(getattr(cfg, section), key):
            raise ConfigError(f"{source}: [{section}] {key} must not be empty")
    try:
        cfg.train_config()
        cfg.augmentation_plan()
    except ValueError as exc:
        raise ConfigError(f"{source}: {exc}") from None


def serialize(cfg: RunConfig) -> str:
    lines = []
    for section in SECTIONS:
        obj = getattr(cfg, section)
        lines.append(f"[{section}]")
        for f in fields(obj):
            if f.name != "counts":
                lines.append(f"{f.name} = {_format_value(getattr(obj, f.name))}")
        lines.append("")
    lines.append(f"[{COUNTS_SECTION}]")
    for name in cfg.classes.names:
        if name in cfg.augment.counts:
            lines.append(f"{name} = {_format_value(cfg.augment.counts[name])}")
    return "\n".join(lines) + "\n"


def load(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse(text, str(path), path.parent)


def with_overrides(cfg: RunConfig, **sections) -> RunConfig:
    """Copy of ``cfg`` with ``section={key: value}`` replacements applied."""
    out = replace(cfg)
    for section, changes in sections.items():
        setattr(out, section, replace(getattr(cfg, section), **changes))
    return out
