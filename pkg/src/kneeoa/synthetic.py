"""Synthetic radiograph generator for end-to-end pipeline runs.

Each image is a dark noisy background with two bright rounded knee
regions side by side. The joint line is a dark horizontal gap across
each knee whose pixel width shrinks linearly with the grade, reaching
exactly 20% of the grade-0 width at grade 4; higher grades additionally
grow small bright bumps at the joint margins. All geometry snaps to a
16x16 grid of the unit square so rectangle edges land on exact pixel
boundaries at the usual working resolutions.

One Generator seeded once drives every draw in a fixed order, so a given
(n, size, seed) triple always produces the identical dataset.
"""

from __future__ import annotations

import numpy as np

from .datasets import AnnotatedRadiograph, ManifestRow
from .errors import ArgumentError

GRID = 16


def grade_counts(n_knees: int, weights=None) -> np.ndarray:
    """Exact per-grade counts for n knees under the requested weights.

    Largest-remainder apportionment: floor everything, then hand the
    remaining knees to the grades with the biggest fractional parts
    (ties favor the lower grade). Sums to n_knees exactly.
    """
    if n_knees < 0:
        raise ArgumentError(f"knee count must be non-negative, got {n_knees}")
    w = np.full(5, 0.2) if weights is None else np.asarray(weights, dtype=np.float64)
    if w.shape != (5,) or np.any(w < 0) or w.sum() <= 0:
        raise ArgumentError(f"weights must be 5 non-negative values, got {weights!r}")
    w = w / w.sum()
    exact = w * n_knees
    counts = np.floor(exact).astype(np.int64)
    frac = exact - counts
    for _ in range(n_knees - int(counts.sum())):
        g = int(np.argmax(frac))
        counts[g] += 1
        frac[g] = -1.0
    return counts


def gap_width_px(grade: int, size: int) -> int:
    """Joint gap width in pixels; linear in grade, grade 4 = 20% of grade 0."""
    base = 5 * max(1, round(size / 128))
    return base - grade * (base // 5)


def _sample_layout(rng: np.random.Generator) -> list[tuple[int, int, int, int]]:
    """Two knee rects in grid cells: (x, y, w, h), left then right."""
    wl = int(rng.integers(5, 7))
    hl = int(rng.integers(6, 9))
    xl = int(rng.integers(1, 3))
    yl = int(rng.integers(3, 6))
    wr = int(rng.integers(5, 7))
    hr = int(rng.integers(6, 9))
    yr = int(rng.integers(3, 6))
    gap = int(rng.integers(1, 3))
    gap = max(1, min(gap, (GRID - 1) - wr - (xl + wl)))
    xr = xl + wl + gap
    return [(xl, yl, wl, hl), (xr, yr, wr, hr)]


def _rounded_rect_mask(h: int, w: int, radius: int) -> np.ndarray:
    """Boolean mask of a w x h rectangle with quarter-circle corners."""
    yy, xx = np.mgrid[0:h, 0:w]
    inside = np.ones((h, w), dtype=bool)
    if radius > 0:
        for cy, cx in ((radius, radius), (radius, w - 1 - radius),
                       (h - 1 - radius, radius), (h - 1 - radius, w - 1 - radius)):
            corner = ((yy < radius) if cy == radius else (yy > h - 1 - radius)) & \
                     ((xx < radius) if cx == radius else (xx > w - 1 - radius))
            far = ((yy - cy) ** 2 + (xx - cx) ** 2) > radius ** 2
            inside &= ~(corner & far)
    return inside


def _render_knee(img: np.ndarray, rect_px: tuple[int, int, int, int], grade: int,
                 rng: np.random.Generator, size: int) -> None:
    x0, y0, w, h = rect_px
    body = float(rng.uniform(0.55, 0.72))
    radius = int(round(0.15 * min(w, h)))
    mask = _rounded_rect_mask(h, w, radius)
    patch = np.full((h, w), body, dtype=np.float32)
    patch += rng.normal(0.0, 0.015, (h, w)).astype(np.float32)

    gap_w = gap_width_px(grade, size)
    cy = h / 2.0 + float(rng.uniform(-h / 10.0, h / 10.0))
    gap_top = int(round(cy - gap_w / 2.0))
    gap_top = max(2, min(gap_top, h - gap_w - 2))
    gap_val = float(rng.uniform(0.08, 0.15))
    patch[gap_top:gap_top + gap_w, :] = gap_val

    # brighter subchondral bands hugging the gap
    band = max(2, round(size / 128))
    lo = max(0, gap_top - band)
    patch[lo:gap_top, :] = np.minimum(patch[lo:gap_top, :] + 0.13, 1.0)
    hi = gap_top + gap_w
    patch[hi:hi + band, :] = np.minimum(patch[hi:hi + band, :] + 0.13, 1.0)

    # marginal bumps: one per grade step, alternating corners of the gap
    b = max(2, round(size / 64))
    spots = [(gap_top - b, 1), (hi, 1), (gap_top - b, w - 1 - b), (hi, w - 1 - b)]
    for i in range(grade):
        sy, sx = spots[i % 4]
        sy = max(0, min(sy, h - b))
        patch[sy:sy + b, sx:sx + b] = float(rng.uniform(0.85, 0.95))

    region = img[y0:y0 + h, x0:x0 + w]
    region[mask] = patch[mask]


def synth_generate(n: int, size: int = 256, seed: int = 0,
                   grade_weights=None) -> list[AnnotatedRadiograph]:
    """Generate n annotated radiographs of two knees each."""
    if n < 1:
        raise ArgumentError(f"need at least 1 image, got {n}")
    if size < 64 or size % GRID != 0:
        raise ArgumentError(f"size must be a multiple of {GRID}, at least 64, got {size}")
    rng = np.random.default_rng(seed)
    grades = np.repeat(np.arange(5), grade_counts(2 * n, grade_weights))
    rng.shuffle(grades)

    records = []
    for i in range(n):
        cells = _sample_layout(rng)
        img = rng.normal(0.09, 0.02, (size, size)).astype(np.float32)
        img += float(rng.uniform(-0.02, 0.02))
        np.clip(img, 0.0, 1.0, out=img)
        rects = []
        pair = (int(grades[2 * i]), int(grades[2 * i + 1]))
        for rect_cells, grade in zip(cells, pair):
            cx, cy, cw, ch = rect_cells
            px = (cx * size // GRID, cy * size // GRID,
                  cw * size // GRID, ch * size // GRID)
            _render_knee(img, px, grade, rng, size)
            rects.append((cx / GRID, cy / GRID, cw / GRID, ch / GRID))
        records.append(AnnotatedRadiograph(
            rects=rects, image=img, grades=list(pair), sides=["L", "R"]))
    return records


def manifest_rows(records: list[AnnotatedRadiograph],
                  paths: list[str] | None = None) -> list[ManifestRow]:
    """One manifest row per knee; paths default to the records' own."""
    rows = []
    for i, rec in enumerate(records):
        path = paths[i] if paths is not None else rec.image_path
        if path is None:
            raise ArgumentError(f"record {i} has no image path")
        if rec.grades is None:
            raise ArgumentError(f"record {i} has no grades")
        for side, grade in zip(rec.sides, rec.grades):
            rows.append(ManifestRow(path, side, grade, None))
    return rows
