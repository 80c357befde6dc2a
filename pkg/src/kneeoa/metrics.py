"""Evaluation metrics and report assembly for 5-grade classification.

The confusion matrix is indexed [true, predicted]. Per-class precision,
recall and F1 treat a zero denominator as 0.0 and flag the class as
degenerate rather than raising. One-vs-rest ROC AUC uses the midrank
(Mann-Whitney) estimator, which handles tied scores exactly; a grade
absent from the truth has no defined AUC and reports None.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import ArgumentError, DimensionError

NUM_CLASSES = 5


def _validate_labels(y, name: str, n_classes: int) -> np.ndarray:
    arr = np.asarray(y)
    if arr.ndim != 1:
        raise DimensionError(f"{name} must be 1-D, got shape {arr.shape}")
    if arr.size == 0:
        raise ArgumentError(f"{name} is empty")
    if not np.issubdtype(arr.dtype, np.integer):
        if not np.all(arr == arr.astype(np.int64)):
            raise ArgumentError(f"{name} must contain integers")
        arr = arr.astype(np.int64)
    if arr.min() < 0 or arr.max() >= n_classes:
        raise ArgumentError(
            f"{name} must lie in [0, {n_classes - 1}], got range "
            f"[{arr.min()}, {arr.max()}]"
        )
    return arr.astype(np.int64)


def confusion_matrix(y_true, y_pred, n_classes: int = NUM_CLASSES) -> np.ndarray:
    """Counts indexed [true, predicted]; shape (n_classes, n_classes)."""
    t = _validate_labels(y_true, "y_true", n_classes)
    p = _validate_labels(y_pred, "y_pred", n_classes)
    if t.shape != p.shape:
        raise DimensionError(f"length mismatch: {t.size} true vs {p.size} predicted")
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (t, p), 1)
    return cm


@dataclass
class PerClassMetrics:
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    degenerate: np.ndarray  # bool per class: some denominator was zero
    macro_precision: float
    macro_recall: float
    macro_f1: float


def precision_recall_f1(cm: np.ndarray) -> PerClassMetrics:
    """Per-class scores from a confusion matrix, plus unweighted means.

    Means run over all classes including degenerate ones, so a grade
    with no samples pulls the macro scores down instead of vanishing.
    """
    cm = np.asarray(cm)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1]:
        raise DimensionError(f"confusion matrix must be square, got shape {cm.shape}")
    if np.any(cm < 0):
        raise ArgumentError("confusion matrix has negative counts")
    k = cm.shape[0]
    tp = np.diag(cm).astype(np.float64)
    pred_total = cm.sum(axis=0).astype(np.float64)
    true_total = cm.sum(axis=1).astype(np.float64)
    degenerate = (pred_total == 0) | (true_total == 0)
    precision = np.divide(tp, pred_total, out=np.zeros(k), where=pred_total > 0)
    recall = np.divide(tp, true_total, out=np.zeros(k), where=true_total > 0)
    pr = precision + recall
    f1 = np.divide(2 * precision * recall, pr, out=np.zeros(k), where=pr > 0)
    return PerClassMetrics(
        precision=precision, recall=recall, f1=f1, degenerate=degenerate,
        macro_precision=float(precision.mean()),
        macro_recall=float(recall.mean()),
        macro_f1=float(f1.mean()),
    )


def _midranks(x: np.ndarray) -> np.ndarray:
    """1-based ranks with ties sharing their group's average rank."""
    _, inv, counts = np.unique(x, return_inverse=True, return_counts=True)
    ends = np.cumsum(counts)
    starts = ends - counts + 1
    return ((starts + ends) / 2.0)[inv]


def roc_auc_ovr(y_true, probs, n_classes: int = NUM_CLASSES) -> list[float | None]:
    """One-vs-rest AUC per class via the midrank estimator.

    A class with no positives (or no negatives) in y_true gets None.
    """
    t = _validate_labels(y_true, "y_true", n_classes)
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 2 or p.shape != (t.size, n_classes):
        raise DimensionError(
            f"probs must have shape ({t.size}, {n_classes}), got {p.shape}"
        )
    aucs: list[float | None] = []
    for k in range(n_classes):
        pos = t == k
        npos = int(pos.sum())
        nneg = t.size - npos
        if npos == 0 or nneg == 0:
            aucs.append(None)
            continue
        ranks = _midranks(p[:, k])
        auc = (ranks[pos].sum() - npos * (npos + 1) / 2.0) / (npos * nneg)
        aucs.append(float(auc))
    return aucs


def roc_curve(scores, positives) -> tuple[np.ndarray, np.ndarray]:
    """(fpr, tpr) points for plotting, one per distinct score, descending
    threshold, with a (0, 0) anchor."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(positives).astype(bool)
    if s.shape != y.shape or s.ndim != 1:
        raise DimensionError("scores and positives must be equal-length 1-D")
    npos = int(y.sum())
    nneg = y.size - npos
    if npos == 0 or nneg == 0:
        raise ArgumentError("roc_curve needs both positives and negatives")
    order = np.argsort(-s, kind="mergesort")
    ys = y[order]
    tps = np.cumsum(ys)
    fps = np.cumsum(~ys)
    keep = np.r_[np.where(np.diff(s[order]))[0], s.size - 1]
    tpr = np.r_[0.0, tps[keep] / npos]
    fpr = np.r_[0.0, fps[keep] / nneg]
    return fpr, tpr


def accuracy_and_mse(y_true, predicted_classes, continuous_grades=None
                     ) -> tuple[float, float, float | None]:
    """(accuracy, class MSE, regression MSE or None).

    Class MSE squares the hard label error; regression MSE compares the
    continuous grade against the integer truth.
    """
    t = _validate_labels(y_true, "y_true", NUM_CLASSES)
    p = _validate_labels(predicted_classes, "predicted_classes", NUM_CLASSES)
    if t.shape != p.shape:
        raise DimensionError(f"length mismatch: {t.size} true vs {p.size} predicted")
    acc = float((t == p).mean())
    clsf_mse = float(((t - p).astype(np.float64) ** 2).mean())
    reg_mse = None
    if continuous_grades is not None:
        c = np.asarray(continuous_grades, dtype=np.float64)
        if c.shape != t.shape:
            raise DimensionError(
                f"continuous grades shape {c.shape} does not match {t.shape}"
            )
        reg_mse = float(((c - t) ** 2).mean())
    return acc, clsf_mse, reg_mse


# --- report --------------------------------------------------------------------


@dataclass
class MetricsReport:
    n: int
    confusion: np.ndarray
    per_class: PerClassMetrics
    auc: list[float | None]
    accuracy: float
    clsf_mse: float
    reg_mse: float | None
    rounded_reg_accuracy: float | None


def grade_from_continuous(value: float) -> int:
    """Round a continuous grade half-up and clip into [0, 4]."""
    return int(np.clip(np.floor(value + 0.5), 0, 4))


def build_report(y_true, class_probs, continuous_grades=None) -> MetricsReport:
    """Full evaluation from probabilities (and optional continuous grades).

    Hard classes come from the probability argmax; when a regression
    output is present its rounded accuracy is reported alongside.
    """
    t = _validate_labels(y_true, "y_true", NUM_CLASSES)
    p = np.asarray(class_probs, dtype=np.float64)
    if p.ndim != 2 or p.shape != (t.size, NUM_CLASSES):
        raise DimensionError(
            f"class_probs must have shape ({t.size}, {NUM_CLASSES}), got {p.shape}"
        )
    pred = p.argmax(axis=1)
    cm = confusion_matrix(t, pred)
    acc, clsf_mse, reg_mse = accuracy_and_mse(t, pred, continuous_grades)
    rounded_acc = None
    if continuous_grades is not None:
        rounded = np.array([grade_from_continuous(v) for v in
                            np.asarray(continuous_grades, dtype=np.float64)])
        rounded_acc = float((rounded == t).mean())
    return MetricsReport(
        n=t.size, confusion=cm, per_class=precision_recall_f1(cm),
        auc=roc_auc_ovr(t, p), accuracy=acc, clsf_mse=clsf_mse,
        reg_mse=reg_mse, rounded_reg_accuracy=rounded_acc,
    )


def report_to_dict(report: MetricsReport) -> dict:
    pc = report.per_class
    d = {
        "n": report.n,
        "confusion": report.confusion.tolist(),
        "per_class": [
            {
                "grade": k,
                "precision": pc.precision[k],
                "recall": pc.recall[k],
                "f1": pc.f1[k],
                "auc": report.auc[k],
                "degenerate": bool(pc.degenerate[k]),
            }
            for k in range(NUM_CLASSES)
        ],
        "means": {
            "precision": pc.macro_precision,
            "recall": pc.macro_recall,
            "f1": pc.macro_f1,
        },
        "accuracy": report.accuracy,
        "clsf_mse": report.clsf_mse,
        "reg_mse": report.reg_mse,
    }
    if report.rounded_reg_accuracy is not None:
        d["rounded_reg_accuracy"] = report.rounded_reg_accuracy
    return d


def report_to_json(report: MetricsReport) -> str:
    return json.dumps(report_to_dict(report), indent=2, sort_keys=False) + "\n"


def render_report(report: MetricsReport) -> str:
    """Fixed-width text table: one row per grade plus the mean row."""
    pc = report.per_class
    lines = []
    header = f"{'Grade':>5}  {'Precision':>9}  {'Recall':>9}  {'F1':>9}  {'AUC':>9}"
    lines.append(header)
    lines.append("-" * len(header))
    for k in range(NUM_CLASSES):
        auc = f"{report.auc[k]:9.3f}" if report.auc[k] is not None else f"{'-':>9}"
        mark = "*" if pc.degenerate[k] else " "
        lines.append(
            f"{k:>4}{mark} {pc.precision[k]:9.3f}  {pc.recall[k]:9.3f}  "
            f"{pc.f1[k]:9.3f}  {auc}"
        )
    lines.append(
        f"{'Mean':>5}  {pc.macro_precision:9.3f}  {pc.macro_recall:9.3f}  "
        f"{pc.macro_f1:9.3f}  {'':>9}"
    )
    lines.append("")
    lines.append(f"samples   : {report.n}")
    lines.append(f"accuracy  : {report.accuracy:.4f}")
    lines.append(f"class MSE : {report.clsf_mse:.4f}")
    if report.reg_mse is not None:
        lines.append(f"reg MSE   : {report.reg_mse:.4f}")
        lines.append(f"rounded reg accuracy: {report.rounded_reg_accuracy:.4f}")
    if np.any(pc.degenerate):
        lines.append("* no samples or no predictions for this grade")
    return "\n".join(lines) + "\n"
