"""Dataset plumbing: manifests, annotation files, and the split rule.

A manifest is a CSV with header ``image_path,side,kl_grade,split`` and
one row per knee, so each radiograph normally contributes two rows. The
``split`` column is optional. Annotation files hold two lines of
``x y w h`` in coordinates normalized to the unit square, the first line
being the knee on the left of the image.

Splitting is radiograph-level: the two knees of one image always land in
the same partition.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ArgumentError, ParseError

SIDES = ("L", "R")
SPLITS = ("train", "val", "test")
GRADES = (0, 1, 2, 3, 4)
MANIFEST_FIELDS = ("image_path", "side", "kl_grade", "split")


@dataclass
class ManifestRow:
    image_path: str
    side: str
    kl_grade: int
    split: str | None = None


@dataclass
class KneeSample:
    """One knee joint image with its grade.

    ``image`` is 2-D float32 in [0, 1] at whatever size the consuming
    model was built for; ``group`` ties the sample back to its source
    radiograph so resplits can keep both knees together.
    """

    image: np.ndarray
    side: str
    kl_grade: int
    split: str | None = None
    group: str | None = None

    def __post_init__(self):
        if self.image.ndim != 2:
            raise ArgumentError(f"sample image must be 2-D, got shape {self.image.shape}")
        if self.side not in SIDES:
            raise ArgumentError(f"side must be one of {SIDES}, got {self.side!r}")
        if self.kl_grade not in GRADES:
            raise ArgumentError(f"grade must be an integer in [0, 4], got {self.kl_grade!r}")
        if self.split is not None and self.split not in SPLITS:
            raise ArgumentError(f"split must be one of {SPLITS}, got {self.split!r}")


@dataclass
class AnnotatedRadiograph:
    """A radiograph with its two joint rectangles in unit coordinates.

    ``rects`` is [left-in-image, right-in-image]; ``grades`` and
    ``sides`` line up with it when present.
    """

    rects: list[tuple[float, float, float, float]]
    image: np.ndarray | None = None
    image_path: str | None = None
    grades: list[int] | None = None
    sides: list[str] = field(default_factory=lambda: list(SIDES))

    def __post_init__(self):
        if len(self.rects) != 2:
            raise ArgumentError(f"a radiograph carries exactly 2 joint rects, got {len(self.rects)}")
        for r in self.rects:
            validate_rect(r)
        if self.grades is not None:
            if len(self.grades) != 2 or any(g not in GRADES for g in self.grades):
                raise ArgumentError(f"grades must be two integers in [0, 4], got {self.grades!r}")


def validate_rect(rect) -> None:
    if len(rect) != 4:
        raise ArgumentError(f"rect must be (x, y, w, h), got {rect!r}")
    x, y, w, h = (float(v) for v in rect)
    if w <= 0 or h <= 0:
        raise ArgumentError(f"rect has non-positive size: {rect!r}")
    if x < 0 or y < 0 or x + w > 1.0 + 1e-9 or y + h > 1.0 + 1e-9:
        raise ArgumentError(f"rect leaves the unit square: {rect!r}")


# --- manifest ----------------------------------------------------------------


def load_manifest(path) -> list[ManifestRow]:
    path = Path(path)
    rows: list[ManifestRow] = []
    seen: dict[tuple[str, str], int] = {}
    with open(path, newline="") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: empty manifest") from None
        if tuple(header) not in (MANIFEST_FIELDS, MANIFEST_FIELDS[:3]):
            raise ParseError(
                f"{path}: bad header {header!r}, expected {','.join(MANIFEST_FIELDS)}"
            )
        has_split = len(header) == 4
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != len(header):
                raise ParseError(f"{path}:{lineno}: expected {len(header)} fields, got {len(rec)}")
            image_path, side = rec[0], rec[1]
            if side not in SIDES:
                raise ParseError(f"{path}:{lineno}: side must be L or R, got {side!r}")
            try:
                grade = int(rec[2])
            except ValueError:
                raise ParseError(f"{path}:{lineno}: grade {rec[2]!r} is not an integer") from None
            if grade not in GRADES:
                raise ParseError(f"{path}:{lineno}: grade {grade} outside [0, 4]")
            split = None
            if has_split and rec[3] != "":
                if rec[3] not in SPLITS:
                    raise ParseError(f"{path}:{lineno}: split {rec[3]!r} not in {SPLITS}")
                split = rec[3]
            dup = seen.get((image_path, side))
            if dup is not None:
                raise ParseError(
                    f"{path}:{lineno}: duplicate knee ({image_path!r}, {side}), "
                    f"first seen on line {dup}"
                )
            seen[(image_path, side)] = lineno
            rows.append(ManifestRow(image_path, side, grade, split))
    return rows


def save_manifest(path, rows: list[ManifestRow]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(MANIFEST_FIELDS)
        for r in rows:
            writer.writerow([r.image_path, r.side, r.kl_grade, r.split or ""])


def grade_histogram(rows) -> np.ndarray:
    """Knee counts per grade, indexed 0..4."""
    counts = np.zeros(5, dtype=np.int64)
    for r in rows:
        grade = r.kl_grade if hasattr(r, "kl_grade") else int(r)
        if grade not in GRADES:
            raise ArgumentError(f"grade {grade} outside [0, 4]")
        counts[grade] += 1
    return counts


# --- annotations -------------------------------------------------------------


def load_annotation(path) -> list[tuple[float, float, float, float]]:
    """Two joint rects from a two-line ``x y w h`` file."""
    path = Path(path)
    rects = []
    with open(path) as f:
        lines = [ln for ln in (raw.strip() for raw in f) if ln]
    if len(lines) != 2:
        raise ParseError(f"{path}: expected 2 annotation lines, got {len(lines)}")
    for lineno, ln in enumerate(lines, start=1):
        parts = ln.split()
        if len(parts) != 4:
            raise ParseError(f"{path}:{lineno}: expected 4 fields, got {len(parts)}")
        try:
            rect = tuple(float(p) for p in parts)
        except ValueError:
            raise ParseError(f"{path}:{lineno}: non-numeric field in {ln!r}") from None
        try:
            validate_rect(rect)
        except ArgumentError as e:
            raise ParseError(f"{path}:{lineno}: {e}") from None
        rects.append(rect)
    return rects


def save_annotation(path, rects) -> None:
    if len(rects) != 2:
        raise ArgumentError(f"annotation files carry exactly 2 rects, got {len(rects)}")
    for r in rects:
        validate_rect(r)
    with open(path, "w") as f:
        for x, y, w, h in rects:
            f.write(f"{x:.6f} {y:.6f} {w:.6f} {h:.6f}\n")


# --- splitting ---------------------------------------------------------------


def split_dataset(items: list, train_frac: float = 0.7, seed: int = 0,
                  key=None) -> tuple[list, list]:
    """Deterministic group-level split into (train, test).

    Items sharing a key (by default their ``image_path``) stay together.
    The boundary is floor(n_groups * train_frac), clamped so both sides
    are non-empty whenever there are at least two groups.
    """
    if not 0.0 < train_frac < 1.0:
        raise ArgumentError(f"train_frac must be in (0, 1), got {train_frac}")
    if key is None:
        key = lambda it: getattr(it, "image_path", None) or getattr(it, "group", None) or it
    groups: dict = {}
    order: list = []
    for it in items:
        k = key(it)
        if k not in groups:
            groups[k] = []
            order.append(k)
        groups[k].append(it)
    n = len(order)
    if n < 2:
        raise ArgumentError(f"need at least 2 groups to split, got {n}")
    perm = np.random.default_rng(seed).permutation(n)
    # floor of the mathematical product; the epsilon absorbs cases like
    # 100 * 0.29 landing just below the integer.
    cut = int(np.floor(n * train_frac + 1e-9))
    cut = max(1, min(cut, n - 1))
    train_keys = [order[i] for i in perm[:cut]]
    test_keys = [order[i] for i in perm[cut:]]
    train = [it for k in train_keys for it in groups[k]]
    test = [it for k in test_keys for it in groups[k]]
    return train, test


def shuffled_batches(n: int, batch_size: int, rng: np.random.Generator):
    """Yield index arrays covering range(n) once, in shuffled order."""
    if batch_size < 1:
        raise ArgumentError(f"batch size must be positive, got {batch_size}")
    perm = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield perm[i:i + batch_size]
