"""Training and prediction for the grading networks.

The classifier trains with Adam on cross entropy plus the L2 penalty and
keeps the weights of the best validation accuracy. The joint network
trains with Nesterov SGD on cce + w * mse plus L2, monitors total
validation loss with a divide-by-10 plateau scheduler, and keeps the
weights of the best total validation loss.

History rows carry the loss components separately, so the logged totals
can be re-derived exactly from cce, mse, the loss weight, and the L2
term.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from . import models
from .autodiff import Tape, backward
from .datasets import KneeSample, shuffled_batches, split_dataset
from .errors import ArgumentError, DimensionError
from .losses import cce, joint_loss, l2_penalty, mse
from .metrics import MetricsReport, build_report
from .models import L2_LAMBDA
from .optim import AdamState, NesterovState, SchedulerState, adam_step, \
    reduce_lr_on_plateau, sgd_nesterov_step

HISTORY_COLUMNS = ("epoch", "lr", "train_cce", "train_mse", "train_total",
                   "val_cce", "val_mse", "val_total", "train_acc", "val_acc")


@dataclass
class HistoryRow:
    epoch: int
    lr: float
    train_cce: float
    train_mse: float
    train_total: float
    val_cce: float
    val_mse: float
    val_total: float
    train_acc: float
    val_acc: float
    train_l2: float = 0.0
    val_l2: float = 0.0


def history_to_csv(rows: list[HistoryRow], path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(HISTORY_COLUMNS)
        for r in rows:
            writer.writerow([r.epoch, f"{r.lr:.8g}"] + [
                f"{getattr(r, col):.6f}" for col in HISTORY_COLUMNS[2:]
            ])


@dataclass
class GradePrediction:
    class_probs: np.ndarray
    predicted_class: int
    continuous_grade: float


def augment_flip(samples: list[KneeSample]) -> list[KneeSample]:
    """Originals plus horizontal mirrors with the same grades.

    Mirroring swaps the anatomical side label. Only training data may be
    augmented; a sample tagged for any other split is an error.
    """
    for s in samples:
        if s.split not in (None, "train"):
            raise ArgumentError(
                f"augmentation is train-only, got a sample tagged {s.split!r}"
            )
    flipped = [
        KneeSample(
            image=np.ascontiguousarray(s.image[:, ::-1]),
            side="R" if s.side == "L" else "L",
            kl_grade=s.kl_grade,
            split=s.split,
            group=s.group,
        )
        for s in samples
    ]
    return list(samples) + flipped


def _stack(samples: list[KneeSample], model) -> tuple[np.ndarray, np.ndarray]:
    h, w = model.input_shape[1:]
    for s in samples:
        if s.image.shape != (h, w):
            raise DimensionError(
                f"sample image is {s.image.shape}, model expects {(h, w)}"
            )
    x = np.stack([s.image for s in samples])[:, None, :, :].astype(model.dtype)
    y = np.array([s.kl_grade for s in samples], dtype=np.int64)
    return x, y


def _eval_split(model, x: np.ndarray, y: np.ndarray, batch_size: int,
                with_reg: bool) -> tuple[float, float, float]:
    """(mean cce, mean mse, accuracy) over a sample set in infer mode."""
    n = x.shape[0]
    cce_sum = mse_sum = correct = 0.0
    for i in range(0, n, batch_size):
        xb, yb = x[i:i + batch_size], y[i:i + batch_size]
        out = models.forward(model, xb, "infer")
        probs = out["probs"]
        cce_sum += cce(probs, yb).item() * yb.size
        correct += int((probs.data.argmax(axis=1) == yb).sum())
        if with_reg:
            mse_sum += mse(out["grade"], yb.astype(np.float64).reshape(-1, 1)).item() * yb.size
    return cce_sum / n, mse_sum / n, correct / n


def _l2_value(model) -> float:
    weights = models.l2_weight_tensors(model)
    return float(sum(L2_LAMBDA * np.sum(w.data.astype(np.float64) ** 2) for w in weights))


def train_classifier(model, train_samples: list[KneeSample],
                     val_samples: list[KneeSample], epochs: int,
                     batch_size: int = 32, seed: int = 0, lr: float = 0.001,
                     stop_at_val_acc: float | None = None,
                     log=None) -> list[HistoryRow]:
    """Adam on cce + L2; the model keeps its best-validation-accuracy
    weights. Optionally stops early once val accuracy reaches a target."""
    if epochs < 1:
        raise ArgumentError(f"epochs must be positive, got {epochs}")
    if not train_samples or not val_samples:
        raise ArgumentError("need non-empty train and validation sets")
    rng = np.random.default_rng(seed)
    xt, yt = _stack(train_samples, model)
    xv, yv = _stack(val_samples, model)
    params = models.param_list(model)
    state = AdamState.for_params(params, lr=lr)
    l2_weights = models.l2_weight_tensors(model)
    stats_x = xt[:min(256, xt.shape[0])]

    best_acc = -1.0
    best = models.snapshot(model)
    history: list[HistoryRow] = []
    for epoch in range(1, epochs + 1):
        cce_sum = correct = seen = 0.0
        for batch in shuffled_batches(xt.shape[0], batch_size, rng):
            xb, yb = xt[batch], yt[batch]
            tape = Tape()
            out = models.forward(model, xb, "train", tape, rng)
            loss_cce = cce(out["probs"], yb, tape)
            loss = joint_loss(loss_cce, l2_penalty(l2_weights, L2_LAMBDA, tape), 1.0, tape)
            backward(loss, tape)
            adam_step(params, state=state, lr=lr)
            cce_sum += loss_cce.item() * yb.size
            correct += int((out["probs"].data.argmax(axis=1) == yb).sum())
            seen += yb.size

        models.reestimate_bn_stats(model, stats_x, batch_size)
        l2_now = _l2_value(model)
        val_cce, _, val_acc = _eval_split(model, xv, yv, batch_size, with_reg=False)
        row = HistoryRow(
            epoch=epoch, lr=state.lr,
            train_cce=cce_sum / seen, train_mse=0.0,
            train_total=cce_sum / seen + l2_now,
            val_cce=val_cce, val_mse=0.0, val_total=val_cce + l2_now,
            train_acc=correct / seen, val_acc=val_acc,
            train_l2=l2_now, val_l2=l2_now,
        )
        history.append(row)
        if log is not None:
            log(f"epoch {epoch:3d}  train_cce {row.train_cce:.4f}  "
                f"val_acc {val_acc:.3f}")
        if val_acc > best_acc:
            best_acc = val_acc
            best = models.snapshot(model)
        if stop_at_val_acc is not None and val_acc >= stop_at_val_acc:
            break
    models.restore(model, best)
    return history


def train_joint(model, train_samples: list[KneeSample],
                val_samples: list[KneeSample], epochs: int,
                batch_size: int = 32, loss_weight: float = 0.5, seed: int = 0,
                lr: float = 0.001, log=None) -> list[HistoryRow]:
    """Nesterov SGD on cce + w * mse + L2 with a plateau scheduler on the
    total validation loss; keeps the best-total-validation-loss weights."""
    if epochs < 1:
        raise ArgumentError(f"epochs must be positive, got {epochs}")
    if not 0.0 <= loss_weight <= 1.0:
        raise ArgumentError(f"loss weight must be in [0, 1], got {loss_weight}")
    if not train_samples or not val_samples:
        raise ArgumentError("need non-empty train and validation sets")
    rng = np.random.default_rng(seed)
    xt, yt = _stack(train_samples, model)
    xv, yv = _stack(val_samples, model)
    params = models.param_list(model)
    state = NesterovState.for_params(params, lr=lr)
    sched = SchedulerState(lr=lr, factor=10.0, patience=4)
    l2_weights = models.l2_weight_tensors(model)
    stats_x = xt[:min(256, xt.shape[0])]

    best_total = math.inf
    best = models.snapshot(model)
    history: list[HistoryRow] = []
    for epoch in range(1, epochs + 1):
        cce_sum = mse_sum = correct = seen = 0.0
        for batch in shuffled_batches(xt.shape[0], batch_size, rng):
            xb, yb = xt[batch], yt[batch]
            tape = Tape()
            out = models.forward(model, xb, "train", tape, rng)
            loss_cce = cce(out["probs"], yb, tape)
            loss_mse = mse(out["grade"], yb.astype(np.float64).reshape(-1, 1), tape)
            combined = joint_loss(loss_cce, loss_mse, loss_weight, tape)
            loss = joint_loss(combined, l2_penalty(l2_weights, L2_LAMBDA, tape), 1.0, tape)
            backward(loss, tape)
            sgd_nesterov_step(params, state=state, lr=sched.lr)
            cce_sum += loss_cce.item() * yb.size
            mse_sum += loss_mse.item() * yb.size
            correct += int((out["probs"].data.argmax(axis=1) == yb).sum())
            seen += yb.size

        models.reestimate_bn_stats(model, stats_x, batch_size)
        l2_now = _l2_value(model)
        val_cce, val_mse, val_acc = _eval_split(model, xv, yv, batch_size, with_reg=True)
        val_total = val_cce + loss_weight * val_mse + l2_now
        row = HistoryRow(
            epoch=epoch, lr=sched.lr,
            train_cce=cce_sum / seen, train_mse=mse_sum / seen,
            train_total=cce_sum / seen + loss_weight * mse_sum / seen + l2_now,
            val_cce=val_cce, val_mse=val_mse, val_total=val_total,
            train_acc=correct / seen, val_acc=val_acc,
            train_l2=l2_now, val_l2=l2_now,
        )
        history.append(row)
        if log is not None:
            log(f"epoch {epoch:3d}  lr {sched.lr:.2g}  val_total {val_total:.4f}  "
                f"val_acc {val_acc:.3f}  val_mse {val_mse:.4f}")
        if val_total < best_total:
            best_total = val_total
            best = models.snapshot(model)
        reduce_lr_on_plateau(sched, val_total)
    models.restore(model, best)
    return history


def predict_grades(model, images, batch_size: int = 32) -> list[GradePrediction]:
    """Per-image class probabilities and a continuous grade in [0, 4].

    Joint models read the regression head; a plain classifier falls back
    to the probability-weighted mean grade.
    """
    if isinstance(images, np.ndarray) and images.ndim == 2:
        images = [images]
    h, w = model.input_shape[1:]
    arrs = []
    for img in images:
        if img.shape != (h, w):
            raise DimensionError(f"image is {img.shape}, model expects {(h, w)}")
        arrs.append(np.asarray(img, dtype=model.dtype))
    x = np.stack(arrs)[:, None, :, :]
    preds: list[GradePrediction] = []
    for i in range(0, x.shape[0], batch_size):
        out = models.forward(model, x[i:i + batch_size], "infer")
        probs = out["probs"].data
        if "grade" in out:
            cont = np.clip(out["grade"].data[:, 0], 0.0, 4.0)
        else:
            cont = probs @ np.arange(5, dtype=probs.dtype)
        for row, c in zip(probs, cont):
            preds.append(GradePrediction(
                class_probs=row.astype(np.float64),
                predicted_class=int(row.argmax()),
                continuous_grade=float(c),
            ))
    return preds


def evaluate_samples(model, samples: list[KneeSample],
                     batch_size: int = 32) -> tuple[MetricsReport, list[GradePrediction]]:
    """Predictions plus the full metrics report for labeled samples."""
    if not samples:
        raise ArgumentError("no samples to evaluate")
    preds = predict_grades(model, [s.image for s in samples], batch_size)
    y = [s.kl_grade for s in samples]
    probs = np.stack([p.class_probs for p in preds])
    continuous = [p.continuous_grade for p in preds] if model.heads.get("grade") else None
    report = build_report(y, probs, continuous)
    return report, preds


def train_val_split(samples: list[KneeSample], val_frac: float = 0.15,
                    seed: int = 0) -> tuple[list[KneeSample], list[KneeSample]]:
    """Group-aware split of a training pool into (train, val)."""
    return split_dataset(samples, 1.0 - val_frac, seed,
                         key=lambda s: s.group if s.group is not None else id(s))
