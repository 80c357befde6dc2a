"""Matplotlib figures rendered next to the delimited reports.

Everything draws through the Agg backend straight to PNG files. The
Software metadata field is stripped so identical inputs produce
byte-identical files.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .errors import ArgumentError
from .metrics import NUM_CLASSES, roc_auc_ovr, roc_curve

_SAVE_KW = dict(dpi=120, metadata={"Software": None})


def _finish(fig, path) -> None:
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)


def save_confusion_heatmap(cm: np.ndarray, path) -> None:
    cm = np.asarray(cm)
    fig, ax = plt.subplots(figsize=(4.8, 4.2))
    im = ax.imshow(cm, cmap="Blues")
    ax.set_xlabel("predicted grade")
    ax.set_ylabel("true grade")
    ax.set_xticks(range(cm.shape[1]))
    ax.set_yticks(range(cm.shape[0]))
    thresh = cm.max() / 2.0 if cm.max() > 0 else 0.5
    for i in range(cm.shape[0]):
        for j in range(cm.shape[1]):
            ax.text(j, i, str(int(cm[i, j])), ha="center", va="center",
                    color="white" if cm[i, j] > thresh else "black", fontsize=9)
    fig.colorbar(im, ax=ax, fraction=0.046)
    _finish(fig, path)


def save_roc_curves(y_true, probs, path) -> None:
    """One-vs-rest ROC per grade; grades without positives are skipped."""
    t = np.asarray(y_true)
    p = np.asarray(probs, dtype=np.float64)
    aucs = roc_auc_ovr(t, p)
    fig, ax = plt.subplots(figsize=(5.2, 4.6))
    drew = False
    for k in range(NUM_CLASSES):
        if aucs[k] is None:
            continue
        fpr, tpr = roc_curve(p[:, k], t == k)
        ax.plot(fpr, tpr, label=f"grade {k} (AUC {aucs[k]:.3f})", linewidth=1.4)
        drew = True
    if not drew:
        raise ArgumentError("no class has both positives and negatives")
    ax.plot([0, 1], [0, 1], linestyle="--", color="gray", linewidth=0.8)
    ax.set_xlabel("false positive rate")
    ax.set_ylabel("true positive rate")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.02)
    ax.legend(loc="lower right", fontsize=8)
    _finish(fig, path)


def save_training_curves(history, path) -> None:
    """Loss and accuracy per epoch for the grading trainers."""
    if not history:
        raise ArgumentError("empty history")
    epochs = [r.epoch for r in history]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9.0, 3.8))
    ax1.plot(epochs, [r.train_total for r in history], label="train")
    ax1.plot(epochs, [r.val_total for r in history], label="validation")
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("total loss")
    ax1.legend(fontsize=8)
    ax2.plot(epochs, [r.train_acc for r in history], label="train")
    ax2.plot(epochs, [r.val_acc for r in history], label="validation")
    ax2.set_xlabel("epoch")
    ax2.set_ylabel("accuracy")
    ax2.set_ylim(0, 1.02)
    ax2.legend(fontsize=8)
    _finish(fig, path)


def save_fcn_curves(history, path) -> None:
    """Train and validation pixel loss per epoch for the localizer."""
    if not history:
        raise ArgumentError("empty history")
    epochs = [r.epoch for r in history]
    fig, ax = plt.subplots(figsize=(5.2, 3.8))
    ax.plot(epochs, [r.train_loss for r in history], label="train")
    ax.plot(epochs, [r.val_loss for r in history], label="validation")
    ax.set_xlabel("epoch")
    ax.set_ylabel("pixel cross entropy")
    ax.set_yscale("log")
    ax.legend(fontsize=8)
    _finish(fig, path)


def save_jaccard_histogram(jaccards, path) -> None:
    js = np.asarray(jaccards, dtype=np.float64)
    if js.size == 0:
        raise ArgumentError("no overlap values to plot")
    fig, ax = plt.subplots(figsize=(5.2, 3.8))
    ax.hist(js, bins=np.linspace(0.0, 1.0, 21), edgecolor="black", linewidth=0.5)
    ax.set_xlabel("overlap (intersection over union)")
    ax.set_ylabel("knees")
    ax.axvline(js.mean(), color="crimson", linestyle="--", linewidth=1.0,
               label=f"mean {js.mean():.3f}")
    ax.legend(fontsize=8)
    _finish(fig, path)
