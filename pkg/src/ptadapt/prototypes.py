"""Prototype regularisation: point features, FIFO bank, matching and its loss."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from . import kernels
from .clustering import (
    ClusterAssignment,
    as_features,
    cluster_means,
    cosine_distance_matrix,
    finch_partition,
)

SOURCE_TAGS = ("target", "predicted")


@dataclass(frozen=True)
class PrototypeSet:
    prototypes: np.ndarray
    source_tag: str

    def __post_init__(self):
        p = as_features(self.prototypes)
        if p.shape[0] < 1:
            raise ValueError("a prototype set cannot be empty")
        if self.source_tag not in SOURCE_TAGS:
            raise ValueError(f"source_tag must be one of {SOURCE_TAGS}")
        p = p.copy()
        p.setflags(write=False)
        object.__setattr__(self, "prototypes", p)

    @property
    def dim(self) -> int:
        return self.prototypes.shape[1]

    def __len__(self) -> int:
        return self.prototypes.shape[0]


@dataclass(frozen=True)
class MemoryBank:
    """Bounded FIFO queue of feature vectors, oldest first."""

    capacity: int
    queue: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.capacity < 1:
            raise ValueError("capacity must be positive")
        q = self.queue
        if q is None:
            q = np.zeros((0, 0))
        q = np.asarray(q, dtype=np.float64)
        if q.ndim != 2 or q.shape[0] > self.capacity:
            raise ValueError("queue must be a 2-D array no longer than capacity")
        q = q.copy()
        q.setflags(write=False)
        object.__setattr__(self, "queue", q)

    def __len__(self) -> int:
        return self.queue.shape[0]

    @property
    def dim(self) -> int | None:
        return self.queue.shape[1] if len(self) else None

    def push(self, features) -> "MemoryBank":
        return bank_push(self, features)


@dataclass(frozen=True)
class Assignment:
    pairs: tuple[tuple[int, int], ...]
    cost: float

    @property
    def rows(self) -> np.ndarray:
        return np.array([i for i, _ in self.pairs], dtype=np.intp)

    @property
    def cols(self) -> np.ndarray:
        return np.array([j for _, j in self.pairs], dtype=np.intp)


def extract_point_features(fmap: np.ndarray, prompts: Iterable, stride: int) -> np.ndarray:
    """Look up the feature cell under each prompt; returns ``(k, channels)``."""
    if stride < 1:
        raise ValueError("stride must be positive")
    fmap = np.asarray(fmap)
    _, rows, cols = fmap.shape
    out = []
    for p in prompts:
        if not (0 <= p.x < cols * stride and 0 <= p.y < rows * stride):
            raise ValueError(f"prompt ({p.x}, {p.y}) outside a {cols * stride}x{rows * stride} image")
        out.append(fmap[:, p.y // stride, p.x // stride])
    if not out:
        return np.zeros((0, fmap.shape[0]))
    return np.stack(out).astype(np.float64)


def build_target_prototypes(
    scenes: Sequence, encoder: Callable[[np.ndarray], np.ndarray], stride: int
) -> PrototypeSet:
    """Cluster frozen-encoder features at every annotated positive prompt.

    ``encoder`` maps an image to its feature map and must be the source model
    (adapter factors at zero).
    """
    if len(scenes) == 0:
        raise ValueError("cannot build prototypes from an empty dataset")
    feats = []
    for scene in scenes:
        fmap = encoder(scene.image)
        positives = [p for inst in scene.instances for p in inst.prompts.positives]
        if not positives:
            raise ValueError(f"scene {scene.scene_id} has no positive prompts")
        feats.append(extract_point_features(fmap, positives, stride))
    x = np.concatenate(feats)
    # cosine distance is undefined for all-zero (fully rectified) features
    x = x[np.linalg.norm(x, axis=1) > 0]
    if x.shape[0] == 0:
        raise ValueError("every prompt feature is zero; no prototypes can be formed")
    assignment = finch_partition(x)
    return PrototypeSet(cluster_means(x, assignment), "target")


def bank_push(bank: MemoryBank, features) -> MemoryBank:
    x = np.asarray(features, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.shape[0] == 0:
        return bank
    if bank.dim is not None and x.shape[1] != bank.dim:
        raise ValueError(f"feature dim {x.shape[1]} does not match bank dim {bank.dim}")
    q = deque(bank.queue, maxlen=None)
    for row in x:
        q.append(row)
        if len(q) > bank.capacity:
            q.popleft()
    return MemoryBank(bank.capacity, np.stack(list(q)))


def cluster_bank(bank: MemoryBank) -> tuple[PrototypeSet, ClusterAssignment]:
    if len(bank) == 0:
        raise ValueError("memory bank is empty; warm-up incomplete")
    assignment = finch_partition(bank.queue)
    return PrototypeSet(cluster_means(bank.queue, assignment), "predicted"), assignment


def predicted_prototypes(bank: MemoryBank) -> PrototypeSet:
    return cluster_bank(bank)[0]


def distance_matrix(targets: PrototypeSet, predicted: PrototypeSet) -> np.ndarray:
    return cosine_distance_matrix(targets.prototypes, predicted.prototypes)


def _augment(tight, col_of_row, row_of_col, i, j, locked):
    """Try to give column ``j`` to row ``i`` while every row keeps a tight
    column. Rows in ``locked`` (and ``i``) keep their current column."""
    n = tight.shape[0]
    freed = col_of_row[i]
    start = row_of_col[j]
    if start in locked or start == i:
        return False
    # BFS from ``start`` over alternating paths to reach the freed column
    parent_col = {start: None}
    frontier = [start]
    found = None
    while frontier and found is None:
        nxt = []
        for r in frontier:
            for c in np.flatnonzero(tight[r]):
                c = int(c)
                if c == j:
                    continue
                if c == freed:
                    found = (r, c)
                    break
                owner = int(row_of_col[c])
                if owner in locked or owner == i or owner in parent_col:
                    continue
                parent_col[owner] = (r, c)
                nxt.append(owner)
            if found is not None:
                break
        frontier = nxt
    if found is None:
        return False
    r, c = found
    while True:
        prev = parent_col[r]
        col_of_row[r] = c
        row_of_col[c] = r
        if prev is None:
            break
        r, c = prev
    col_of_row[i] = j
    row_of_col[j] = i
    return True


def _lexicographic_refine(cost, col_of_row, u, v):
    n = cost.shape[0]
    tol = 1e-9 * max(1.0, float(np.abs(cost).max()))
    tight = (cost - u[:, None] - v[None, :]) <= tol
    if np.count_nonzero(tight) == n:
        return col_of_row
    col_of_row = col_of_row.copy()
    row_of_col = np.empty(n, dtype=np.intp)
    row_of_col[col_of_row] = np.arange(n)
    locked: set[int] = set()
    for i in range(n):
        for j in np.flatnonzero(tight[i]):
            j = int(j)
            if col_of_row[i] == j:
                break
            if _augment(tight, col_of_row, row_of_col, i, j, locked):
                break
        locked.add(i)
    return col_of_row


def hungarian_match(D) -> Assignment:
    """Minimum-cost matching of ``min(rows, cols)`` disjoint pairs.

    Rectangular inputs are padded to square with a constant above every real
    entry. Among equal-cost optima the lexicographically smallest pair list
    (sorted by row) is returned.
    """
    D = np.asarray(D, dtype=np.float64)
    if D.ndim != 2 or D.shape[0] < 1 or D.shape[1] < 1:
        raise ValueError(f"distance matrix must be non-empty 2-D, got {D.shape}")
    if not np.all(np.isfinite(D)):
        raise ValueError("distance matrix has non-finite entries")
    kt, kp = D.shape
    n = max(kt, kp)
    pad = float(D.max()) + 1.0
    cost = np.full((n, n), pad)
    cost[:kt, :kp] = D
    col_of_row, u, v = kernels.solve_square(np.ascontiguousarray(cost))
    col_of_row = _lexicographic_refine(cost, col_of_row, u, v)
    pairs = tuple((i, int(j)) for i, j in enumerate(col_of_row) if i < kt and j < kp)
    total = float(sum(D[i, j] for i, j in pairs))
    return Assignment(pairs, total)


def matching_loss(D, assignment: Assignment, targets: PrototypeSet, predicted: PrototypeSet):
    """Summed matched distance and its gradient w.r.t. each predicted prototype.

    The assignment is held fixed. Unmatched predicted prototypes get a zero
    gradient.
    """
    D = np.asarray(D, dtype=np.float64)
    t = targets.prototypes
    p = predicted.prototypes
    if D.shape != (len(targets), len(predicted)) or t.shape[1] != p.shape[1]:
        raise ValueError("distance matrix does not match the prototype sets")
    if len(assignment.pairs) != min(D.shape):
        raise ValueError("assignment does not cover min(rows, cols) pairs")
    grad = np.zeros_like(p)
    value = 0.0
    for i, j in assignment.pairs:
        if not (0 <= i < D.shape[0] and 0 <= j < D.shape[1]):
            raise ValueError(f"pair ({i}, {j}) out of range")
        value += D[i, j]
        nt = np.linalg.norm(t[i])
        np_ = np.linalg.norm(p[j])
        dot = float(t[i] @ p[j])
        grad[j] += -t[i] / (nt * np_) + dot * p[j] / (nt * np_**3)
    return {"value": float(value), "grad_predicted": grad}
