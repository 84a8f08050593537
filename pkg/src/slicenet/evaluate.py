"""Error rates, confusion matrices, one-vs-rest ROC/AUC, and feature export."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import convnet as C

log = logging.getLogger(__name__)


@dataclass
class ConfusionMatrix:
    """Rows are ground truth, columns are predictions."""

    counts: np.ndarray
    class_names: tuple[str, ...]

    @classmethod
    def from_predictions(cls, truth, predicted, class_names: Sequence[str]) -> "ConfusionMatrix":
        n = len(class_names)
        counts = np.zeros((n, n), dtype=np.int64)
        np.add.at(counts, (np.asarray(truth, dtype=np.intp), np.asarray(predicted, dtype=np.intp)), 1)
        return cls(counts, tuple(class_names))

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def error_rate(self) -> float:
        return 1.0 - float(np.trace(self.counts)) / self.total if self.total else 0.0

    def row_totals(self) -> np.ndarray:
        return self.counts.sum(axis=1)


@dataclass
class RocCurve:
    thresholds: np.ndarray  # descending; the first is +inf
    fpr: np.ndarray
    tpr: np.ndarray
    auc: float

    def to_csv(self) -> str:
        rows = ["fpr,tpr,threshold"]
        rows += [f"{f!r},{t!r},{th!r}" for f, t, th in zip(self.fpr.tolist(), self.tpr.tolist(), self.thresholds.tolist())]
        return "\n".join(rows) + "\n"


def roc_curve(scores, labels) -> RocCurve:
    """ROC over every distinct score threshold; tied scores enter together."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("ROC needs both positive and negative samples")
    order = np.argsort(-scores, kind="stable")
    s, y = scores[order], labels[order]
    last_of_group = np.r_[np.nonzero(np.diff(s))[0], s.size - 1]
    tps = np.cumsum(y)[last_of_group]
    fps = (last_of_group + 1) - tps
    tpr = np.r_[0.0, tps / n_pos]
    fpr = np.r_[0.0, fps / n_neg]
    thresholds = np.r_[np.inf, s[last_of_group]]
    area = float(np.sum((fpr[1:] - fpr[:-1]) * (tpr[1:] + tpr[:-1])) / 2.0)
    return RocCurve(thresholds, fpr, tpr, area)


def auc(scores, labels) -> float:
    """Trapezoidal area under the ROC curve (equals the Mann-Whitney statistic, ties counted 1/2)."""
    return roc_curve(scores, labels).auc


@dataclass
class EvalReport:
    class_names: tuple[str, ...]
    confusion: ConfusionMatrix
    rocs: dict[str, RocCurve | None]
    aucs: dict[str, float | None]
    mean_auc: float
    error_rate: float
    counts: dict[str, int]
    meta: dict[str, str] = field(default_factory=dict)

    @property
    def total(self) -> int:
        return self.confusion.total


def report_from_probabilities(probs, labels, class_names: Sequence[str]) -> EvalReport:
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.intp)
    if len(labels) == 0:
        raise ValueError("test set is empty")
    names = tuple(class_names)
    predicted = probs.argmax(axis=1)  # lowest index wins ties
    cm = ConfusionMatrix.from_predictions(labels, predicted, names)
    rocs: dict[str, RocCurve | None] = {}
    aucs: dict[str, float | None] = {}
    for k, name in enumerate(names):
        positive = labels == k
        if positive.all() or not positive.any():
            log.warning("class %r is %s in the test set; its AUC is undefined",
                        name, "absent" if not positive.any() else "the only class")
            rocs[name] = aucs[name] = None
            continue
        rocs[name] = roc_curve(probs[:, k], positive)
        aucs[name] = rocs[name].auc
    defined = [a for a in aucs.values() if a is not None]
    mean = float(sum(defined) / len(defined)) if defined else math.nan
    counts = {name: int(n) for name, n in zip(names, cm.row_totals())}
    return EvalReport(names, cm, rocs, aucs, mean, cm.error_rate, counts)


def evaluate(model: C.ConvNetModel, images, labels, batch_size: int = 32) -> EvalReport:
    """Evaluate on ``images[N,1,H,W]`` with integer ``labels``."""
    probs = C.predict_batch(model, images, batch_size)
    return report_from_probabilities(probs, labels, model.class_names)


# -- report files ------------------------------------------------------------


def _fmt(v) -> str:
    return "NA" if v is None or (isinstance(v, float) and math.isnan(v)) else f"{v:.6f}"


def format_report(report: EvalReport) -> str:
    names = report.class_names
    width = max(8, max(len(n) for n in names) + 2)
    lines = [f"{'class':<{width}}{'n':>6}{'AUC':>10}"]
    for n in names:
        lines.append(f"{n:<{width}}{report.counts[n]:>6}{_fmt(report.aucs[n]):>10}")
    lines.append(f"{'mean AUC':<{width}}{report.total:>6}{_fmt(report.mean_auc):>10}")
    lines.append(f"error rate: {100 * report.error_rate:.1f}% ({report.total} test images)")
    lines.append("")
    lines.append("confusion matrix (rows: truth, columns: prediction)")
    lines.append(" " * width + "".join(f"{n[:7]:>8}" for n in names))
    for n, row in zip(names, report.confusion.counts):
        lines.append(f"{n:<{width}}" + "".join(f"{v:>8d}" for v in row))
    return "\n".join(lines) + "\n"


def report_to_tsv(report: EvalReport) -> str:
    rows = [
        ("classes", ",".join(report.class_names)),
        ("n_test", str(report.total)),
        ("error_rate", repr(report.error_rate)),
        ("mean_auc", repr(report.mean_auc)),
    ]
    for n in report.class_names:
        rows.append((f"count.{n}", str(report.counts[n])))
        a = report.aucs[n]
        rows.append((f"auc.{n}", "NA" if a is None else repr(a)))
    rows.append(("confusion", ",".join(str(int(v)) for v in report.confusion.counts.ravel())))
    rows += sorted(report.meta.items())
    return "".join(f"{k}\t{v}\n" for k, v in rows)


def report_from_tsv(text: str) -> EvalReport:
    kv = {}
    for line in text.splitlines():
        if not line or line.startswith("#"):
            continue
        k, _, v = line.partition("\t")
        kv[k] = v
    try:
        names = tuple(kv["classes"].split(","))
        n = len(names)
        counts = np.array([int(v) for v in kv["confusion"].split(",")], dtype=np.int64).reshape(n, n)
        aucs = {c: (None if kv[f"auc.{c}"] == "NA" else float(kv[f"auc.{c}"])) for c in names}
        report = EvalReport(
            names, ConfusionMatrix(counts, names), {c: None for c in names}, aucs,
            float(kv["mean_auc"]), float(kv["error_rate"]), {c: int(kv[f"count.{c}"]) for c in names},
        )
    except (KeyError, ValueError) as exc:
        raise ValueError(f"malformed report: {exc}") from exc
    known = {"classes", "n_test", "error_rate", "mean_auc", "confusion"}
    report.meta = {k: v for k, v in kv.items() if k not in known and not k.startswith(("count.", "auc."))}
    return report


def write_report(report: EvalReport, directory, stem: str = "report") -> dict[str, Path]:
    """Write text, TSV and per-class ROC CSVs; returns the written paths."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    paths = {"text": d / f"{stem}.txt", "tsv": d / f"{stem}.tsv"}
    paths["text"].write_text(format_report(report), encoding="utf-8")
    paths["tsv"].write_text(report_to_tsv(report), encoding="utf-8")
    for name, roc in report.rocs.items():
        if roc is not None:
            p = d / f"{stem}_roc_{name}.csv"
            p.write_text(roc.to_csv(), encoding="utf-8")
            paths[f"roc.{name}"] = p
    return paths


# -- features ----------------------------------------------------------------


def export_features(model: C.ConvNetModel, ids: Sequence[str], images, labels, path) -> Path:
    """One line per image: ``id<TAB>label<TAB>v1,...,vD`` (activations entering softmax)."""
    feats = C.features_batch(model, images)
    labels = np.asarray(labels)
    lines = []
    for rid, lab, vec in zip(ids, labels, feats):
        name = model.class_names[int(lab)]
        lines.append(f"{rid}\t{name}\t" + ",".join(repr(float(v)) for v in vec))
    path = Path(path)
    try:
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot write feature file {path}: {exc}") from exc
    return path


# -- comparison --------------------------------------------------------------


@dataclass
class ReportDelta:
    class_names: tuple[str, ...]
    before: EvalReport
    after: EvalReport
    auc_delta: dict[str, float | None]
    mean_auc_delta: float
    error_delta: float
    confusion_delta: np.ndarray

    def is_zero(self) -> bool:
        return (self.error_delta == 0 and self.mean_auc_delta == 0 and not self.confusion_delta.any()
                and all(d in (None, 0.0) for d in self.auc_delta.values()))


def compare_reports(before: EvalReport, after: EvalReport) -> ReportDelta:
    if before.class_names != after.class_names:
        raise ValueError(f"class sets differ: {before.class_names} vs {after.class_names}")
    deltas = {}
    for n in before.class_names:
        a, b = before.aucs[n], after.aucs[n]
        deltas[n] = None if a is None or b is None else b - a
    return ReportDelta(
        before.class_names, before, after, deltas,
        after.mean_auc - before.mean_auc,
        after.error_rate - before.error_rate,
        after.confusion.counts - before.confusion.counts,
    )


def format_comparison(delta: ReportDelta) -> str:
    """Before/after table in the layout of a per-class AUC summary."""
    b, a = delta.before, delta.after
    width = max(10, max(len(n) for n in delta.class_names) + 2)
    lines = [f"{'class':<{width}}{'n(1)':>7}{'n(2)':>7}{'AUC(1)':>9}{'AUC(2)':>9}{'dAUC':>10}"]
    for n in delta.class_names:
        d = delta.auc_delta[n]
        lines.append(f"{n:<{width}}{b.counts[n]:>7}{a.counts[n]:>7}{_fmt(b.aucs[n]):>9}{_fmt(a.aucs[n]):>9}"
                     f"{'NA' if d is None else f'{d:+.6f}':>10}")
    lines.append(f"{'mean AUC':<{width}}{b.total:>7}{a.total:>7}{_fmt(b.mean_auc):>9}{_fmt(a.mean_auc):>9}"
                 f"{delta.mean_auc_delta:>+10.6f}")
    lines.append(f"{'error':<{width}}{'':>14}{100 * b.error_rate:>8.1f}%{100 * a.error_rate:>8.1f}%"
                 f"{100 * delta.error_delta:>+9.1f}%")
    lines.append("")
    lines.append("confusion matrix change (after - before)")
    for n, row in zip(delta.class_names, delta.confusion_delta):
        lines.append(f"{n:<{width}}" + "".join(f"{v:>+6d}" for v in row))
    return "\n".join(lines) + "\n"
