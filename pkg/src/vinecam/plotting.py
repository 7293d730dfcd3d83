"""PNG figures: training curves, confusion matrix, fold accuracies."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# keeps PNG bytes stable across runs
_META = {"Software": None}


def plot_curves(history, path) -> None:
    epochs = history.column("epoch")
    fig, (ax_l, ax_a) = plt.subplots(1, 2, figsize=(9, 3.5))
    ax_l.plot(epochs, history.column("train_loss"), "o-", label="train")
    ax_l.plot(epochs, history.column("val_loss"), "s-", label="validation")
    ax_l.set_xlabel("epoch")
    ax_l.set_ylabel("cross-entropy loss")
    ax_l.legend()
    ax_a.plot(epochs, history.column("train_acc"), "o-", label="train")
    ax_a.plot(epochs, history.column("val_acc"), "s-", label="validation")
    ax_a.set_xlabel("epoch")
    ax_a.set_ylabel("accuracy")
    ax_a.set_ylim(0, 1.02)
    ax_a.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_META)
    plt.close(fig)


def plot_confusion(cm, path) -> None:
    counts = np.asarray(cm.counts)
    fig, ax = plt.subplots(figsize=(1.2 * cm.k + 2, 1.2 * cm.k + 1.5))
    ax.imshow(counts, cmap="Blues")
    for i in range(cm.k):
        for j in range(cm.k):
            ax.text(j, i, str(counts[i, j]), ha="center", va="center",
                    color="white" if counts[i, j] > counts.max() / 2 else "black")
    ax.set_xticks(range(cm.k), cm.classes, rotation=30, ha="right")
    ax.set_yticks(range(cm.k), cm.classes)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_META)
    plt.close(fig)


def plot_folds(accuracies, path) -> None:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    folds = np.arange(1, len(accuracies) + 1)
    ax.bar(folds, accuracies)
    ax.set_xticks(folds)
    ax.set_xlabel("fold")
    ax.set_ylabel("accuracy")
    lo = min(accuracies)
    ax.set_ylim(max(0.0, lo - 0.05), 1.0)
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_META)
    plt.close(fig)
