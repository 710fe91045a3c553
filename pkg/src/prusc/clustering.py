"""k-means on embeddings, cluster dominance labels, minority sets, purity."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels

log = logging.getLogger(__name__)

NEUTRAL = -1


@dataclass
class ClusterModel:
    k: int
    centroids: np.ndarray
    assignments: np.ndarray
    inertia: float
    history: list[float] = field(default_factory=list)
    n_iter: int = 0


def _kmeans_pp(X, k, rng):
    n = X.shape[0]
    chosen = [int(rng.integers(n))]
    d = kernels.sq_dist_to(X, X[chosen[0]])
    for _ in range(1, k):
        total = d.sum()
        if total > 0:
            idx = int(rng.choice(n, p=d / total))
        else:
            rest = np.setdiff1d(np.arange(n), chosen)
            idx = int(rng.choice(rest))
        chosen.append(idx)
        d = np.minimum(d, kernels.sq_dist_to(X, X[idx]))
    return X[chosen].copy()


def kmeans(X, k: int = 8, seed: int = 0, max_iter: int = 300, tol: float = 1e-6) -> ClusterModel:
    """k-means++ seeding followed by Lloyd iterations.

    Stops when no centroid moves more than ``tol``. An empty cluster is
    re-seeded with the point farthest from its current centroid. ``history``
    holds the inertia after every update step and is non-increasing.
    """
    X = np.ascontiguousarray(X, dtype=np.float64)
    n = X.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"need 1 <= k <= n, got k={k}, n={n}")
    rng = np.random.default_rng(seed)
    C = _kmeans_pp(X, k, rng)
    history = []
    it = 0
    for it in range(1, max_iter + 1):
        labels, d = kernels.assign(X, C)
        counts = np.bincount(labels, minlength=k)
        for j in np.flatnonzero(counts == 0):
            donors = counts[labels] > 1
            i = int(np.argmax(np.where(donors, d, -1.0)))
            counts[labels[i]] -= 1
            labels[i], d[i] = j, 0.0
            counts[j] = 1
        sums, counts = kernels.centroid_sums(X, labels, k)
        new_C = sums / counts[:, None]
        history.append(float(kernels.sq_dist_rows(X, new_C, labels).sum()))
        shift = np.sqrt(((new_C - C) ** 2).sum(axis=1)).max()
        C = new_C
        if shift < tol:
            break
    labels, d = kernels.assign(X, C)
    inertia = float(d.sum())
    history.append(inertia)
    return ClusterModel(k, C, labels, inertia, history, it)


@dataclass
class ClusterSummary:
    """Dominance labels per cluster: a class id, or ``NEUTRAL`` (-1)."""

    labels: np.ndarray
    assignments: np.ndarray
    dominant: dict[int, list[int]]
    neutral: list[int]
    minority: dict[int, np.ndarray]
    threshold: float = 0.9
    warnings: list[str] = field(default_factory=list)

    @property
    def k(self) -> int:
        return len(self.labels)

    def to_dict(self) -> dict:
        return {"k": self.k, "threshold": self.threshold,
                "labels": ["neutral" if l == NEUTRAL else f"dominant({int(l)})" for l in self.labels],
                "dominant": {str(c): v for c, v in self.dominant.items()},
                "neutral": self.neutral,
                "minority_counts": {str(c): int(len(v)) for c, v in self.minority.items()},
                "minority": {str(c): v.tolist() for c, v in self.minority.items()},
                "warnings": self.warnings}

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))


def label_clusters(assignments, class_labels, k: int | None = None, threshold: float = 0.9,
                   n_classes: int | None = None) -> ClusterSummary:
    """Tag each cluster dominant(i) when at least ``threshold`` of it is class i."""
    if isinstance(assignments, ClusterModel):
        k = assignments.k if k is None else k
        assignments = assignments.assignments
    assignments = np.asarray(assignments, dtype=np.int64)
    y = np.asarray(class_labels, dtype=np.int64)
    if assignments.shape != y.shape:
        raise ValueError("assignments and class labels are not aligned")
    k = int(assignments.max()) + 1 if k is None else k
    n_classes = int(y.max()) + 1 if n_classes is None else n_classes
    table = np.zeros((k, n_classes), dtype=np.int64)
    np.add.at(table, (assignments, y), 1)
    sizes = table.sum(axis=1)
    labels = np.full(k, NEUTRAL, dtype=np.int64)
    warns = []
    for j in range(k):
        if sizes[j] == 0:
            warns.append(f"cluster {j} is empty; treated as neutral")
            log.warning(warns[-1])
            continue
        # relative slack absorbs rounding in e.g. 0.9 * 10
        hits = np.flatnonzero(table[j] >= threshold * sizes[j] * (1 - 1e-12))
        if hits.size:
            labels[j] = hits[0]
    dominant = {i: [int(j) for j in np.flatnonzero(labels == i)] for i in range(n_classes)}
    neutral = [int(j) for j in np.flatnonzero(labels == NEUTRAL)]
    summary = ClusterSummary(labels, assignments, dominant, neutral, {}, threshold, warns)
    summary.minority = minority_sets(summary, y)
    return summary


def minority_sets(summary: ClusterSummary, class_labels) -> dict[int, np.ndarray]:
    """Class-i samples sitting in clusters dominated by another class."""
    y = np.asarray(class_labels, dtype=np.int64)
    lab = summary.labels[summary.assignments]
    foreign = (lab != NEUTRAL) & (lab != y)
    return {i: np.flatnonzero(foreign & (y == i)) for i in summary.dominant}


def purity(assignments, labels):
    """Per-cluster and overall majority-label purity (ties go to the lower label)."""
    assignments = np.asarray(assignments, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    clusters = np.unique(assignments)
    n_labels = int(labels.max()) + 1 if labels.size else 0
    per, majority_total = {}, 0
    for c in clusters:
        counts = np.bincount(labels[assignments == c], minlength=n_labels)
        per[int(c)] = counts.max() / counts.sum()
        majority_total += counts.max()
    overall = majority_total / len(labels) if len(labels) else float("nan")
    return per, float(overall)
