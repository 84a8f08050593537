"""Command-line driver.

Exit codes: 0 success, 1 computational failure (e.g. divergence), 2 usage,
configuration or input errors.
"""

from __future__ import annotations

import argparse
import logging
import os
import platform
import sys
from dataclasses import dataclass
from importlib import metadata
from pathlib import Path
from typing import Sequence

import numpy as np

from . import config as cfgmod
from . import convnet as C
from . import dataset as D
from . import evaluate as E
from . import tps_augment as A
from . import volume_profile as V
from .image import Image2D
from .tensor import ShapeError

log = logging.getLogger("slicenet")

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


@dataclass
class Context:
    threads: int | None
    argv: list[str]


def _version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "unknown"


def repro_block(command: str, seeds: dict[str, int], cfg: cfgmod.RunConfig | None = None,
                extra: dict[str, str] | None = None) -> str:
    """Lines prefixed with ``#`` so they can trail any delimited output."""
    items = [("command", command)]
    items += [(f"seed.{k}", str(v)) for k, v in seeds.items()]
    if cfg is not None:
        items.append(("config_sha256", cfg.digest()))
    items += list((extra or {}).items())
    items += [("slicenet", _version()), ("python", platform.python_version()), ("numpy", np.__version__)]
    return "".join(f"# {k}\t{v}\n" for k, v in items)


def _write_repro(path: Path, block: str) -> None:
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(block)


def _fmt_count(n: int) -> str:
    return f"{n:,}"


def augmentation_summary(counts: dict[str, int], plan: A.AugmentationPlan, names: Sequence[str]) -> str:
    """Per-class ``N -> N*N_t*N_r*N_d`` rows plus a total row."""
    width = max(len("total"), *(len(n) for n in names))
    rows, before, after = [], 0, 0
    for name in names:
        n = counts.get(name, 0)
        m = n * plan.multiplier(name)
        nt, nr, nd = plan.counts.get(name, (1, 1, 1))
        rows.append(f"{name:<{width}} {_fmt_count(n)} → {_fmt_count(m)}   (N_t={nt} N_r={nr} N_d={nd})")
        before += n
        after += m
    rows.append(f"{'total':<{width}} {_fmt_count(before)} → {_fmt_count(after)}")
    return "\n".join(rows) + "\n"


# -- corpus helpers ----------------------------------------------------------


def _class_set(cfg: cfgmod.RunConfig) -> D.ClassSet:
    path = cfg.path(cfg.classes.keywords) if cfg.classes.keywords else None
    try:
        return D.ClassSet.load(path, cfg.classes.names)
    except (OSError, ValueError) as exc:
        raise UsageError(f"keyword table: {exc}") from None


def _labeled_entries(cfg: cfgmod.RunConfig, manifest_path: Path):
    manifest = D.parse_manifest(manifest_path)
    labeled, unlabelable = D.mine_all(manifest.records, _class_set(cfg))
    return manifest, D.duplicate_multiclass(labeled), unlabelable


def _split_and_load(cfg: cfgmod.RunConfig):
    manifest_path = cfg.path(cfg.corpus.manifest)
    _, entries, unlabelable = _labeled_entries(cfg, manifest_path)
    for r in unlabelable:
        log.warning("skipping unlabelable record %s (line %d)", r.id, r.line)
    sp = D.split(entries, cfg.split.ratio, cfg.split.seed, cfg.classes.names)
    root = manifest_path.parent / cfg.corpus.root
    D.load_entries(sp.test, root, cfg.corpus.size)
    train_entries = sp.train
    if cfg.train.use_augmented:
        aug_manifest = cfg.path(cfg.augment.output) / "manifest.tsv"
        if not aug_manifest.exists():
            raise UsageError(f"use_augmented is set but {aug_manifest} does not exist; run 'augment' first")
        _, aug_entries, _ = _labeled_entries(cfg, aug_manifest)
        keep = {e.source_id for e in sp.train}
        train_entries = [e for e in aug_entries if e.source_id in keep]
        root = aug_manifest.parent
    D.load_entries(train_entries, root, cfg.corpus.size)
    return train_entries, sp.test


def _build_model(cfg: cfgmod.RunConfig) -> C.ConvNetModel:
    specs = C.ARCHITECTURES[cfg.network.architecture](len(cfg.classes.names))
    return C.ConvNetModel.build(specs, cfg.classes.names, (1, cfg.corpus.size, cfg.corpus.size), cfg.network.seed)


def _seeds(cfg: cfgmod.RunConfig) -> dict[str, int]:
    return {"split": cfg.split.seed, "network": cfg.network.seed, "train": cfg.train.seed, "augment": cfg.augment.seed}


# -- subcommands -------------------------------------------------------------


def cmd_phantoms(args, ctx: Context) -> int:
    if args.per_class < 1:
        raise UsageError(f"--per-class must be >= 1, got {args.per_class}")
    out = Path(args.out)
    try:
        (out / "images").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create output directory {out}: {exc}") from None
    records = []
    counts: dict[str, int] = {}
    for img, label in D.generate_phantoms(args.per_class, args.seed, args.size):
        rel = f"images/{img.id}.pgm"
        D.write_pgm16(img, out / rel)
        records.append(D.KeyImageRecord(img.id, rel, f"CT {D.PHANTOM_TAGS[label]} W CONTRAST", D.PHANTOM_TAGS[label]))
        counts[label] = counts.get(label, 0) + 1
    D.write_manifest(records, out / "manifest.tsv", f"phantom corpus: per_class={args.per_class} seed={args.seed}")
    segments = [(n, 6) for n in C.DEFAULT_CLASSES]
    vol, _ = V.stacked_phantom_volume(segments, blend=5, seed=args.seed + 1, size=args.size)
    V.save_volume(vol, out / "torso.slivol")
    cfg = cfgmod.RunConfig()
    cfg.corpus.size = args.size
    cfg.train.learning_rate, cfg.train.batch_size, cfg.train.epochs, cfg.train.lr_decay_interval = 0.002, 16, 10, 8
    cfg.split.seed = cfg.network.seed = cfg.train.seed = cfg.augment.seed = args.seed
    (out / "slicenet.ini").write_text(cfgmod.serialize(cfg), encoding="utf-8")
    for name in C.DEFAULT_CLASSES:
        print(f"{name}\t{counts[name]}")
    print(f"total\t{sum(counts.values())}")
    print(f"wrote {out / 'manifest.tsv'}, {out / 'torso.slivol'} and {out / 'slicenet.ini'}")
    return EXIT_OK


def cmd_augment(args, ctx: Context) -> int:
    cfg = cfgmod.load(args.config)
    plan = cfg.augmentation_plan()
    manifest_path = cfg.path(cfg.corpus.manifest)
    _, entries, unlabelable = _labeled_entries(cfg, manifest_path)
    root = manifest_path.parent / cfg.corpus.root
    out = cfg.path(cfg.augment.output)
    (out / "images").mkdir(parents=True, exist_ok=True)
    bounds = plan.bounds()
    records, counts = [], {}
    examples: list[Image2D] = []
    titles: list[str] = []
    cache: dict[str, Image2D] = {}
    for e in entries:
        if e.path not in cache:
            cache[e.path] = D.read_image(root / e.path)
        src = cache[e.path]
        counts[e.label] = counts.get(e.label, 0) + 1
        image = Image2D(src.pixels, src.spacing, e.id)
        for variant, prov in A.augment_image(image, plan.counts.get(e.label, (1, 1, 1)), bounds, plan.seed, e.id):
            rel = f"images/{variant.id}.slimg"
            D.write_slimg(variant, out / rel)
            records.append(D.KeyImageRecord(
                variant.id, rel, label_override=e.label,
                extra={"source": e.source_id, "transform": prov.transform_text(), "seed": str(plan.seed)},
            ))
            if len(examples) < 8:
                examples.append(variant.pixels)
                titles.append(variant.id)
    block = repro_block("augment", {"augment": plan.seed}, cfg)
    D.write_manifest(records, out / "manifest.tsv", block.replace("# ", "").rstrip("\n"))
    summary = augmentation_summary(counts, plan, cfg.classes.names)
    (out / "summary.txt").write_text(summary + block, encoding="utf-8")
    if examples:
        from .plotting import plot_image_grid
        plot_image_grid(examples, out / "examples.png", titles)
    print(summary, end="")
    print(block, end="")
    if unlabelable:
        for r in unlabelable:
            print(f"unlabelable: {r.id} (line {r.line}): {r.study_description!r} / {r.body_part_examined!r}",
                  file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


def cmd_train(args, ctx: Context) -> int:
    cfg = cfgmod.load(args.config)
    train_entries, test_entries = _split_and_load(cfg)
    names = cfg.classes.names
    model = _build_model(cfg)
    x, y = D.to_arrays(train_entries, names)
    held = D.to_arrays(test_entries, names) if test_entries else None
    log.info("training on %d images (%d held out), %d parameters", len(y), len(test_entries), model.parameter_count())
    model, history = C.train(model, (x, y), cfg.train_config(), held_out=held)
    model_path = cfg.path(cfg.output.model)
    model_path.parent.mkdir(parents=True, exist_ok=True)
    C.save_model(model, model_path)
    reports = cfg.path(cfg.output.reports)
    reports.mkdir(parents=True, exist_ok=True)
    lines = ["epoch\tlearning_rate\tloss\ttrain_accuracy\theld_out_accuracy"]
    for r in history:
        held_acc = "NA" if r.held_out_accuracy is None else repr(r.held_out_accuracy)
        lines.append(f"{r.epoch}\t{r.learning_rate!r}\t{r.loss!r}\t{r.train_accuracy!r}\t{held_acc}")
    block = repro_block("train", _seeds(cfg), cfg, {"model": str(model_path)})
    (reports / "training_log.tsv").write_text("\n".join(lines) + "\n" + block, encoding="utf-8")
    from .plotting import plot_training
    plot_training(history, reports / "training_log.png")
    last = history[-1] if history else None
    if last:
        print(f"final epoch {last.epoch}: loss {last.loss:.5f}, train accuracy {last.train_accuracy:.4f}"
              + ("" if last.held_out_accuracy is None else f", held-out accuracy {last.held_out_accuracy:.4f}"))
    print(f"wrote {model_path}")
    print(block, end="")
    return EXIT_OK


def _load_model_for(cfg: cfgmod.RunConfig, path) -> C.ConvNetModel:
    try:
        model = C.load_model(path)
    except OSError as exc:
        raise UsageError(f"cannot read model {path}: {exc}") from None
    if model.class_names != tuple(cfg.classes.names):
        raise ShapeError(f"model {path} predicts {model.num_classes} classes {model.class_names} "
                         f"but the config declares {len(cfg.classes.names)} {tuple(cfg.classes.names)}")
    if model.input_shape[1:] != (cfg.corpus.size, cfg.corpus.size):
        raise ShapeError(f"model {path} expects {model.input_shape[1]}x{model.input_shape[2]} input, "
                         f"config size is {cfg.corpus.size}")
    return model


def cmd_eval(args, ctx: Context) -> int:
    cfg = cfgmod.load(args.config)
    model = _load_model_for(cfg, args.model)
    _, test_entries = _split_and_load(cfg)
    x, y = D.to_arrays(test_entries, cfg.classes.names)
    report = E.evaluate(model, x, y)
    out = cfg.path(cfg.output.reports)
    stem = args.stem
    block = repro_block("eval", _seeds(cfg), cfg, {"model_fnv1a64": f"{C.fnv1a64(Path(args.model).read_bytes()):016x}"})
    paths = E.write_report(report, out, stem)
    _write_repro(paths["tsv"], block)
    _write_repro(paths["text"], block)
    E.export_features(model, [e.id for e in test_entries], x, y, out / f"{stem}_features.tsv")
    from .plotting import plot_confusion, plot_roc
    plot_roc(report, out / f"{stem}_roc.png")
    plot_confusion(report, out / f"{stem}_confusion.png")
    print(E.format_report(report), end="")
    print(block, end="")
    return EXIT_OK


def cmd_compare(args, ctx: Context) -> int:
    reports = []
    for p in (args.a, args.b):
        try:
            reports.append(E.report_from_tsv(Path(p).read_text(encoding="utf-8")))
        except OSError as exc:
            raise UsageError(f"cannot read report {p}: {exc}") from None
        except ValueError as exc:
            raise UsageError(f"{p}: {exc}") from None
    try:
        delta = E.compare_reports(*reports)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    text = E.format_comparison(delta)
    print(text, end="")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        block = repro_block("compare", {}, extra={"a": str(args.a), "b": str(args.b)})
        (out / "comparison.txt").write_text(text + block, encoding="utf-8")
        from .plotting import plot_confusion_pair
        plot_confusion_pair(delta.before, delta.after, out / "comparison_confusion.png")
    return EXIT_OK


def cmd_profile(args, ctx: Context) -> int:
    try:
        model = C.load_model(args.model)
    except OSError as exc:
        raise UsageError(f"cannot read model {args.model}: {exc}") from None
    try:
        volume = V.load_volume(args.volume)
    except OSError as exc:
        raise UsageError(f"cannot read volume {args.volume}: {exc}") from None
    prof = V.profile(model, volume, ctx.threads)
    out = Path(args.out)
    try:
        out.parent.mkdir(parents=True, exist_ok=True)
        V.emit_profile(prof, out)
    except OSError as exc:
        raise UsageError(str(exc)) from None
    block = repro_block("profile", {"model": model.seed}, extra={
        "model_fnv1a64": f"{C.fnv1a64(Path(args.model).read_bytes()):016x}",
        "volume": str(args.volume),
        "slices": str(volume.voxels.shape[0]),
    })
    _write_repro(out.with_name(out.name + ".repro.txt"), block)
    from .plotting import plot_profile
    plot_profile(prof, out.with_suffix(".png"))
    winners = np.bincount(prof.argmax(), minlength=len(prof.class_names))
    for name, n in zip(prof.class_names, winners):
        print(f"{name}\t{n} slices")
    print(f"wrote {out}")
    print(block, end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="slicenet", description="Anatomy-specific CT slice classification toolkit.")
    p.add_argument("--threads", type=int, default=None, help="cap on worker threads (default: all cores)")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("phantoms", help="generate a synthetic phantom corpus")
    s.add_argument("--per-class", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--size", type=int, default=256, help=argparse.SUPPRESS)
    s.set_defaults(func=cmd_phantoms)

    s = sub.add_parser("augment", help="expand a corpus with rigid and thin-plate-spline variants")
    s.add_argument("--config", required=True)
    s.set_defaults(func=cmd_augment)

    s = sub.add_parser("train", help="train a model on the training split")
    s.add_argument("--config", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="evaluate a model on the test split")
    s.add_argument("--config", required=True)
    s.add_argument("--model", required=True)
    s.add_argument("--stem", default="report", help="file stem for report outputs")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("compare", help="compare two machine-readable reports")
    s.add_argument("a")
    s.add_argument("b")
    s.add_argument("--out", default=None, help="directory for the comparison text and figure")
    s.set_defaults(func=cmd_compare)

    s = sub.add_parser("profile", help="classify every axial slice of a volume")
    s.add_argument("--model", required=True)
    s.add_argument("--volume", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_profile)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.threads is not None and args.threads < 1:
        print(f"slicenet: error: --threads must be >= 1, got {args.threads}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    ctx = Context(args.threads or os.cpu_count(), argv)
    try:
        return args.func(args, ctx)
    except C.TrainingDiverged as exc:
        print(f"slicenet {args.command}: training diverged: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    except (UsageError, cfgmod.ConfigError, D.ManifestError, D.LabelError, D.SplitError, D.ImageFormatError,
            V.VolumeFormatError, C.ModelFileError, ShapeError) as exc:
        print(f"slicenet {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"slicenet {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ArithmeticError, FloatingPointError, V.SliceError, RuntimeError) as exc:
        print(f"slicenet {args.command}: computation failed: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
