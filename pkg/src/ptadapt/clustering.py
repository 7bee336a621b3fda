"""Parameter-free first-neighbour clustering (FINCH) under cosine distance."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels

# distances this close to a row minimum count as ties (smallest index wins),
# so exact geometric ties do not depend on summation roundoff
TIE_TOL = 1e-12


@dataclass(frozen=True)
class ClusterAssignment:
    labels: np.ndarray
    k: int

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=np.intp)
        if labels.ndim != 1:
            raise ValueError("labels must be one-dimensional")
        if self.k < 1 or labels.min(initial=0) < 0 or labels.max(initial=0) >= self.k:
            raise ValueError("labels out of range")
        if np.unique(labels).size != self.k:
            raise ValueError("every cluster index must be used")
        object.__setattr__(self, "labels", labels)

    def members(self, i: int) -> np.ndarray:
        return np.flatnonzero(self.labels == i)


def as_features(features) -> np.ndarray:
    x = np.asarray(features, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] < 1:
        raise ValueError(f"features must be an (n, dim) array, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("features contain non-finite values")
    return x


def cosine_distance(u, v) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise ValueError(f"dimension mismatch: {u.shape} vs {v.shape}")
    nu = np.linalg.norm(u)
    nv = np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise ValueError("cosine distance undefined for a zero-norm vector")
    return float(1.0 - np.dot(u, v) / (nu * nv))


def _unit_rows(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1)
    if np.any(norms == 0.0):
        bad = int(np.flatnonzero(norms == 0.0)[0])
        raise ValueError(f"zero-norm feature vector at index {bad}")
    return x / norms[:, None]


def cosine_distance_matrix(a, b) -> np.ndarray:
    """``1 - cos`` between every row of ``a`` and every row of ``b``."""
    a = as_features(a)
    b = as_features(b)
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    d = 1.0 - _unit_rows(a) @ _unit_rows(b).T
    return np.clip(d, 0.0, 2.0)


def first_neighbors(features) -> np.ndarray:
    x = as_features(features)
    if x.shape[0] < 2:
        raise ValueError("first neighbours need at least two vectors")
    d = cosine_distance_matrix(x, x)
    off = d.copy()
    np.fill_diagonal(off, np.inf)
    low = off.min(axis=1, keepdims=True)
    d = np.where(off <= low + TIE_TOL, low, d)
    return kernels.nearest_indices(np.ascontiguousarray(d))


def _one_level(x: np.ndarray) -> np.ndarray:
    if x.shape[0] == 1:
        return np.zeros(1, dtype=np.intp)
    return kernels.link_components(first_neighbors(x))


def finch_partition(features, levels: int = 1) -> ClusterAssignment:
    """Cluster by connected components of the first-neighbour graph.

    ``levels=1`` gives the finest partition. Higher levels repeat the step on
    the cluster means, stopping early once a single cluster remains.
    """
    if levels < 1:
        raise ValueError("levels must be >= 1")
    x = as_features(features)
    labels = _one_level(x)
    for _ in range(levels - 1):
        k = int(labels.max()) + 1
        if k == 1:
            break
        means = cluster_means(x, ClusterAssignment(labels, k))
        labels = _one_level(means)[labels]
    return ClusterAssignment(labels, int(labels.max()) + 1)


def cluster_means(features, assignment: ClusterAssignment) -> np.ndarray:
    """Mean vector per cluster, rows ordered by cluster index."""
    x = as_features(features)
    labels = np.asarray(assignment.labels)
    if labels.shape[0] != x.shape[0]:
        raise ValueError(f"{labels.shape[0]} labels for {x.shape[0]} features")
    if labels.min() < 0 or labels.max() >= assignment.k:
        raise ValueError("label out of range")
    sums = np.zeros((assignment.k, x.shape[1]))
    np.add.at(sums, labels, x)
    counts = np.bincount(labels, minlength=assignment.k)
    return sums / counts[:, None]
