"""Figures rendered next to the delimited report outputs.

Every function takes the data object and an output path, writes a PNG and
returns the path.  The Agg backend is forced so this works headless.
"""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.dpi": 100,
    "savefig.dpi": 120,
    "savefig.bbox": "tight",
    "font.size": 10,
    "axes.labelsize": 10,
    "axes.titlesize": 11,
    "legend.fontsize": 8,
    "axes.spines.right": False,
    "axes.spines.top": False,
    "lines.linewidth": 1.6,
}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_roc(report, path, title: str = "One-vs-rest ROC") -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.2, 4.0))
        for name in report.class_names:
            roc = report.rocs.get(name)
            if roc is None:
                continue
            ax.plot(roc.fpr, roc.tpr, label=f"{name} (AUC {roc.auc:.3f})")
        ax.plot([0, 1], [0, 1], color="0.7", linestyle=":", linewidth=1)
        ax.set_xlabel("false positive rate")
        ax.set_ylabel("true positive rate")
        ax.set_title(title)
        ax.set_xlim(-0.01, 1.01)
        ax.set_ylim(-0.01, 1.01)
        ax.legend(loc="lower right")
        return _save(fig, path)


def _confusion_axes(ax, counts, names, title):
    ax.imshow(counts, cmap="Blues")
    ax.set_xticks(range(len(names)), names, rotation=45, ha="right")
    ax.set_yticks(range(len(names)), names)
    ax.set_xlabel("predicted")
    ax.set_ylabel("truth")
    ax.set_title(title)
    hi = counts.max() if counts.size else 0
    for i in range(counts.shape[0]):
        for j in range(counts.shape[1]):
            ax.text(j, i, str(int(counts[i, j])), ha="center", va="center",
                    color="white" if counts[i, j] > 0.6 * hi else "black", fontsize=8)


def plot_confusion(report, path, title: str = "Confusion matrix") -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.2, 4.0))
        _confusion_axes(ax, report.confusion.counts, report.class_names, title)
        return _save(fig, path)


def plot_confusion_pair(before, after, path, labels: Sequence[str] = ("before", "after")) -> Path:
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 2, figsize=(8.4, 4.0))
        for ax, rep, lab in zip(axes, (before, after), labels):
            _confusion_axes(ax, rep.confusion.counts, rep.class_names,
                            f"{lab} (error {100 * rep.error_rate:.1f}%)")
        fig.tight_layout()
        return _save(fig, path)


def plot_profile(prof, path, title: str = "Slice probabilities") -> Path:
    """Per-class probability against craniocaudal position, z running downwards."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.0, 6.0))
        z = prof.z_mm
        for k, name in enumerate(prof.class_names):
            ax.plot(prof.probs[:, k], z, label=name)
        ax.set_ylim(z.max() if len(z) else 1, z.min() if len(z) else 0)
        ax.set_xlim(0, 1)
        ax.set_xlabel("probability")
        ax.set_ylabel("z (mm)")
        ax.set_title(title)
        ax.legend(loc="lower right")
        return _save(fig, path)


def plot_training(history, path) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5.0, 3.2))
        epochs = [r.epoch + 1 for r in history]
        ax.plot(epochs, [r.loss for r in history], color="C0", label="training loss")
        ax.set_xlabel("epoch")
        ax.set_ylabel("loss")
        ax2 = ax.twinx()
        ax2.plot(epochs, [r.train_accuracy for r in history], color="C1", label="train accuracy")
        held = [r.held_out_accuracy for r in history]
        if all(h is not None for h in held):
            ax2.plot(epochs, held, color="C2", label="held-out accuracy")
        ax2.set_ylim(0, 1.02)
        ax2.set_ylabel("accuracy")
        lines = ax.get_lines() + ax2.get_lines()
        ax.legend(lines, [ln.get_label() for ln in lines], loc="center right")
        return _save(fig, path)


def plot_image_grid(images: Sequence[np.ndarray], path, titles: Sequence[str] | None = None, ncols: int = 4) -> Path:
    n = len(images)
    nrows = max(1, int(np.ceil(n / ncols)))
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(nrows, ncols, figsize=(2.0 * ncols, 2.0 * nrows), squeeze=False)
        for k, ax in enumerate(axes.ravel()):
            ax.axis("off")
            if k < n:
                ax.imshow(images[k], cmap="gray")
                if titles:
                    ax.set_title(titles[k], fontsize=7)
        return _save(fig, path)
