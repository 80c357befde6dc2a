"""Joint localization: masks, box extraction, crops, and overlap scoring.

The localizer is trained on (image, mask) pairs where the mask is the
union of the two annotated joint rectangles. At inference the predicted
probability map is thresholded, its two largest 4-connected components
become candidate joints, and their tight bounds are mapped back to the
original image frame for cropping.

All box arithmetic treats a box as the half-open pixel region
[x, x+w) x [y, y+h).
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass

import numpy as np

from . import models
from .autodiff import Tape, backward
from .datasets import shuffled_batches
from .errors import ArgumentError, DetectionFailureError, DimensionError
from .losses import bce_pixelwise
from .optim import AdamState, adam_step


def round_half_up(v: float) -> int:
    return int(math.floor(v + 0.5))


@dataclass(frozen=True)
class BBox:
    """Integer pixel box with the frame it lives in."""

    x: int
    y: int
    w: int
    h: int
    frame_w: int
    frame_h: int

    def __post_init__(self):
        if self.w < 1 or self.h < 1:
            raise ArgumentError(f"box must have positive size, got {self.w}x{self.h}")
        if self.x < 0 or self.y < 0 or self.x + self.w > self.frame_w \
                or self.y + self.h > self.frame_h:
            raise ArgumentError(
                f"box ({self.x}, {self.y}, {self.w}, {self.h}) leaves its "
                f"{self.frame_w}x{self.frame_h} frame"
            )

    @property
    def x_center(self) -> float:
        return self.x + self.w / 2.0


def rasterize_mask(rects, size: int) -> np.ndarray:
    """Rasterize unit-square rects into a {0,1} float mask of size x size.

    Each edge rounds half-up independently, so abutting rects stay
    abutting. A rect that collapses to zero pixels is an error.
    """
    if size < 1:
        raise ArgumentError(f"mask size must be positive, got {size}")
    if not rects:
        raise ArgumentError("no rects to rasterize")
    mask = np.zeros((size, size), dtype=np.float32)
    for rect in rects:
        x, y, w, h = (float(v) for v in rect)
        x0 = max(0, round_half_up(x * size))
        y0 = max(0, round_half_up(y * size))
        x1 = min(size, round_half_up((x + w) * size))
        y1 = min(size, round_half_up((y + h) * size))
        if x1 <= x0 or y1 <= y0:
            raise ArgumentError(f"rect {rect!r} rasterizes to zero pixels at size {size}")
        mask[y0:y1, x0:x1] = 1.0
    return mask


def resize_bilinear(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize with corner alignment: output corners sample input
    corners exactly, and a same-size resize is the identity."""
    if image.ndim != 2:
        raise DimensionError(f"resize needs a 2-D image, got shape {image.shape}")
    if out_h < 1 or out_w < 1:
        raise ArgumentError(f"output size must be positive, got {out_h}x{out_w}")
    ih, iw = image.shape
    img = image.astype(np.float32, copy=False)
    ys = np.arange(out_h) * ((ih - 1) / (out_h - 1)) if out_h > 1 else np.zeros(1)
    xs = np.arange(out_w) * ((iw - 1) / (out_w - 1)) if out_w > 1 else np.zeros(1)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, ih - 1)
    x1 = np.minimum(x0 + 1, iw - 1)
    fy = (ys - y0).astype(np.float32)[:, None]
    fx = (xs - x0).astype(np.float32)[None, :]
    a = img[np.ix_(y0, x0)]
    b = img[np.ix_(y0, x1)]
    c = img[np.ix_(y1, x0)]
    d = img[np.ix_(y1, x1)]
    return a * (1 - fy) * (1 - fx) + b * (1 - fy) * fx + c * fy * (1 - fx) + d * fy * fx


# --- training and prediction -------------------------------------------------


@dataclass
class FcnEpoch:
    epoch: int
    lr: float
    train_loss: float
    val_loss: float


def training_pairs(records, size: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """(image, mask) pairs at the localizer's working resolution."""
    pairs = []
    for rec in records:
        if rec.image is None:
            raise ArgumentError("record has no pixel data")
        img = rec.image
        if img.shape != (size, size):
            img = resize_bilinear(img, size, size)
        pairs.append((img.astype(np.float32), rasterize_mask(rec.rects, size)))
    return pairs


def train_fcn(model, pairs, epochs: int, batch_size: int = 8, seed: int = 0,
              val_frac: float = 0.15, lr: float = 0.001,
              log=None) -> list[FcnEpoch]:
    """Adam on pixelwise BCE; keeps the best-validation-loss weights.

    The last val_frac of a seeded shuffle is held out for validation.
    Returns one history row per epoch; the model ends up holding the
    best weights seen, not necessarily the final ones.
    """
    if epochs < 1:
        raise ArgumentError(f"epochs must be positive, got {epochs}")
    if not pairs:
        raise ArgumentError("no training pairs")
    size = model.input_shape[1]
    for img, mask in pairs:
        if img.shape != (size, size) or mask.shape != (size, size):
            raise DimensionError(
                f"pair shape {img.shape}/{mask.shape} does not match model size {size}"
            )
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(pairs))
    n_val = max(1, int(len(pairs) * val_frac)) if len(pairs) > 1 else 0
    val_idx = order[len(pairs) - n_val:]
    train_idx = order[:len(pairs) - n_val]
    if train_idx.size == 0:
        raise ArgumentError("validation fraction leaves no training pairs")

    params = models.param_list(model)
    state = AdamState.for_params(params, lr=lr)
    # running stats are re-estimated from this fixed subset before each
    # validation pass, so early epochs are not judged on cold statistics
    stats_idx = train_idx[:min(64, train_idx.size)]
    stats_x = np.stack([pairs[i][0] for i in stats_idx])[:, None, :, :]
    best_val = math.inf
    best = models.snapshot(model)
    history = []
    for epoch in range(1, epochs + 1):
        losses_sum = 0.0
        seen = 0
        for batch in shuffled_batches(train_idx.size, batch_size, rng):
            idx = train_idx[batch]
            x = np.stack([pairs[i][0] for i in idx])[:, None, :, :]
            t = np.stack([pairs[i][1] for i in idx])[:, None, :, :]
            tape = Tape()
            out = models.forward(model, x, "train", tape, rng)
            loss = bce_pixelwise(out["mask"], t, tape)
            backward(loss, tape)
            adam_step(params, state=state, lr=lr)
            losses_sum += loss.item() * idx.size
            seen += idx.size
        train_loss = losses_sum / seen

        models.reestimate_bn_stats(model, stats_x, batch_size)
        if val_idx.size:
            val_loss = 0.0
            for i in val_idx:
                x = pairs[i][0][None, None, :, :]
                out = models.forward(model, x, "infer")
                val_loss += bce_pixelwise(out["mask"], pairs[i][1][None, None, :, :]).item()
            val_loss /= val_idx.size
        else:
            val_loss = train_loss
        row = FcnEpoch(epoch, state.lr, train_loss, val_loss)
        history.append(row)
        if log is not None:
            log(f"epoch {epoch:3d}  train_bce {train_loss:.5f}  val_bce {val_loss:.5f}")
        if val_loss < best_val:
            best_val = val_loss
            best = models.snapshot(model)
    models.restore(model, best)
    return history


def predict_mask(model, image: np.ndarray) -> np.ndarray:
    """Joint probability map for one image at the model's resolution."""
    size = model.input_shape[1]
    if image.shape != (size, size):
        image = resize_bilinear(image, size, size)
    out = models.forward(model, image[None, None, :, :].astype(model.dtype), "infer")
    return out["mask"].data[0, 0]


# --- box extraction -----------------------------------------------------------


def _component_stats(binary: np.ndarray) -> list[tuple[int, int, int, int, int]]:
    """4-connected components in scan order: (count, min_r, min_c, max_r, max_c)."""
    h, w = binary.shape
    seen = np.zeros((h, w), dtype=bool)
    comps = []
    for r0 in range(h):
        row = binary[r0]
        for c0 in range(w):
            if not row[c0] or seen[r0, c0]:
                continue
            count = 0
            min_r = max_r = r0
            min_c = max_c = c0
            queue = deque([(r0, c0)])
            seen[r0, c0] = True
            while queue:
                r, c = queue.popleft()
                count += 1
                if r < min_r: min_r = r
                if r > max_r: max_r = r
                if c < min_c: min_c = c
                if c > max_c: max_c = c
                if r > 0 and binary[r - 1, c] and not seen[r - 1, c]:
                    seen[r - 1, c] = True; queue.append((r - 1, c))
                if r + 1 < h and binary[r + 1, c] and not seen[r + 1, c]:
                    seen[r + 1, c] = True; queue.append((r + 1, c))
                if c > 0 and binary[r, c - 1] and not seen[r, c - 1]:
                    seen[r, c - 1] = True; queue.append((r, c - 1))
                if c + 1 < w and binary[r, c + 1] and not seen[r, c + 1]:
                    seen[r, c + 1] = True; queue.append((r, c + 1))
            comps.append((count, min_r, min_c, max_r, max_c))
    return comps


def extract_bboxes(prob_map: np.ndarray, threshold: float = 0.5) -> tuple[BBox, BBox]:
    """Tight boxes of the two largest components at the given threshold.

    Returns (left, right) by x-center. Size ties keep the component found
    first in row-major scan order. Fewer than two components raise
    DetectionFailureError carrying the number found.
    """
    if prob_map.ndim != 2:
        raise DimensionError(f"probability map must be 2-D, got shape {prob_map.shape}")
    if not 0.0 < threshold < 1.0:
        raise ArgumentError(f"threshold must be in (0, 1), got {threshold}")
    h, w = prob_map.shape
    binary = prob_map >= threshold
    comps = _component_stats(binary)
    if len(comps) < 2:
        raise DetectionFailureError(len(comps))
    # stable sort on -count keeps scan order among equals
    top = sorted(range(len(comps)), key=lambda i: -comps[i][0])[:2]
    boxes = []
    for i in sorted(top):
        count, min_r, min_c, max_r, max_c = comps[i]
        boxes.append(BBox(min_c, min_r, max_c - min_c + 1, max_r - min_r + 1, w, h))
    boxes.sort(key=lambda b: b.x_center)
    return boxes[0], boxes[1]


def rect_to_bbox(rect, size: int) -> BBox:
    """Unit-square rect to a pixel box at the given frame size."""
    x, y, w, h = (float(v) for v in rect)
    x0 = max(0, round_half_up(x * size))
    y0 = max(0, round_half_up(y * size))
    x1 = min(size, round_half_up((x + w) * size))
    y1 = min(size, round_half_up((y + h) * size))
    if x1 <= x0 or y1 <= y0:
        raise ArgumentError(f"rect {rect!r} collapses at size {size}")
    return BBox(x0, y0, x1 - x0, y1 - y0, size, size)


def upscale_bbox(bbox: BBox, original_w: int, original_h: int) -> BBox:
    """Map a box to a different frame by scaling each coordinate, rounding
    half-up, and clamping inside the new frame. Same-size frames return
    the box unchanged."""
    if original_w < 1 or original_h < 1:
        raise ArgumentError(f"target frame must be positive, got {original_w}x{original_h}")
    sx = original_w / bbox.frame_w
    sy = original_h / bbox.frame_h
    x = round_half_up(bbox.x * sx)
    y = round_half_up(bbox.y * sy)
    w = max(1, round_half_up(bbox.w * sx))
    h = max(1, round_half_up(bbox.h * sy))
    x = max(0, min(x, original_w - 1))
    y = max(0, min(y, original_h - 1))
    w = min(w, original_w - x)
    h = min(h, original_h - y)
    return BBox(x, y, w, h, original_w, original_h)


def crop_and_resize(image: np.ndarray, bbox: BBox, out_h: int = 200,
                    out_w: int = 300) -> np.ndarray:
    """Cut the box region and resize it to a fixed output size."""
    if image.ndim != 2:
        raise DimensionError(f"image must be 2-D, got shape {image.shape}")
    ih, iw = image.shape
    if bbox.x + bbox.w > iw or bbox.y + bbox.h > ih:
        raise ArgumentError(
            f"box ({bbox.x}, {bbox.y}, {bbox.w}, {bbox.h}) leaves the {iw}x{ih} image"
        )
    crop = image[bbox.y:bbox.y + bbox.h, bbox.x:bbox.x + bbox.w]
    return resize_bilinear(crop, out_h, out_w)


# --- scoring -------------------------------------------------------------------


def jaccard(a: BBox, b: BBox) -> float:
    """Intersection over union of two boxes in the same frame."""
    if (a.frame_w, a.frame_h) != (b.frame_w, b.frame_h):
        raise ArgumentError(
            f"boxes live in different frames: {(a.frame_w, a.frame_h)} vs "
            f"{(b.frame_w, b.frame_h)}"
        )
    ix = max(0, min(a.x + a.w, b.x + b.w) - max(a.x, b.x))
    iy = max(0, min(a.y + a.h, b.y + b.h) - max(a.y, b.y))
    inter = ix * iy
    union = a.w * a.h + b.w * b.h - inter
    return inter / union


@dataclass
class DetectionReport:
    n: int
    mean_jaccard: float
    std_jaccard: float
    rate_25: float
    rate_50: float
    rate_75: float
    jaccards: list[float]


def detection_report(pairs: list[tuple[BBox, BBox]]) -> DetectionReport:
    """Overlap statistics for (predicted, truth) box pairs.

    Rates are the percentage of knees whose overlap reaches 0.25, 0.5 and
    0.75; the spread is the population standard deviation.
    """
    if not pairs:
        raise ArgumentError("detection report needs at least one pair")
    js = np.array([jaccard(p, t) for p, t in pairs], dtype=np.float64)
    return DetectionReport(
        n=len(js),
        mean_jaccard=float(js.mean()),
        std_jaccard=float(js.std()),
        rate_25=float((js >= 0.25).mean() * 100.0),
        rate_50=float((js >= 0.50).mean() * 100.0),
        rate_75=float((js >= 0.75).mean() * 100.0),
        jaccards=[float(j) for j in js],
    )
