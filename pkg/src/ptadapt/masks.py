"""Raster masks, overlap scores, evaluation metrics and box extraction.

Masks are 2-D ``bool`` arrays indexed ``[row, col]``; logits are 2-D float
arrays of the same layout. Throughout the package ``x`` is the column and
``y`` the row.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class HorizontalBox:
    """Inclusive axis-aligned pixel box."""

    x_min: int
    y_min: int
    x_max: int
    y_max: int

    def __post_init__(self):
        if self.x_min > self.x_max or self.y_min > self.y_max:
            raise ValueError(f"degenerate box {self}")

    @property
    def width(self) -> int:
        return self.x_max - self.x_min + 1

    @property
    def height(self) -> int:
        return self.y_max - self.y_min + 1

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)


def as_mask(a) -> np.ndarray:
    m = np.asarray(a)
    if m.ndim != 2 or m.shape[0] < 1 or m.shape[1] < 1:
        raise ValueError(f"mask must be a non-empty 2-D grid, got shape {m.shape}")
    return m.astype(bool, copy=False)


def _check_pair(a, b):
    a = as_mask(a)
    b = as_mask(b)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    return a, b


def mask_iou(a, b) -> float:
    """Intersection over union; two empty masks score 1.0."""
    a, b = _check_pair(a, b)
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union


def dice_score(a, b) -> float:
    """``2|a & b| / (|a| + |b|)``; two empty masks score 1.0."""
    a, b = _check_pair(a, b)
    total = np.count_nonzero(a) + np.count_nonzero(b)
    if total == 0:
        return 1.0
    return 2.0 * np.count_nonzero(a & b) / total


def iou_matrix(masks: Sequence) -> np.ndarray:
    """Pairwise IoU with a zeroed diagonal."""
    if len(masks) == 0:
        raise ValueError("iou_matrix needs at least one mask")
    flat = [as_mask(m) for m in masks]
    shape = flat[0].shape
    for m in flat[1:]:
        if m.shape != shape:
            raise ValueError(f"mask shapes differ: {shape} vs {m.shape}")
    stack = np.stack([m.ravel() for m in flat]).astype(np.int64)
    inter = stack @ stack.T
    area = np.diag(inter)
    union = area[:, None] + area[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(union > 0, inter / np.maximum(union, 1), 1.0)
    np.fill_diagonal(out, 0.0)
    return out


def per_instance_scores(pred: Sequence, gt: Sequence) -> list[tuple[float, float]]:
    """``(iou, dice)`` for each index-aligned pair."""
    if len(pred) != len(gt):
        raise ValueError(f"{len(pred)} predictions for {len(gt)} ground-truth masks")
    if len(pred) == 0:
        raise ValueError("nothing to evaluate")
    return [(mask_iou(p, g), dice_score(p, g)) for p, g in zip(pred, gt)]


def evaluate(pred: Sequence, gt: Sequence) -> dict[str, float]:
    """Mean per-instance IoU and mean per-instance Dice (reported as F1)."""
    scores = per_instance_scores(pred, gt)
    ious = [s[0] for s in scores]
    dices = [s[1] for s in scores]
    return {"mIoU": float(np.mean(ious)), "F1": float(np.mean(dices))}


def min_enclosing_box(mask) -> HorizontalBox:
    m = as_mask(mask)
    rows = np.flatnonzero(m.any(axis=1))
    if rows.size == 0:
        raise ValueError("empty mask has no enclosing box")
    cols = np.flatnonzero(m.any(axis=0))
    return HorizontalBox(int(cols[0]), int(rows[0]), int(cols[-1]), int(rows[-1]))


def binarize(logits, threshold: float = 0.0) -> np.ndarray:
    """Strict ``logit > threshold`` cut."""
    x = np.asarray(logits, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"logits must be 2-D, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("logits contain non-finite values")
    return x > threshold
