"""Class-balanced mask-training subset and cluster-aware contrastive batches."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, concat, l2_normalize, logsumexp, take, tsum
from .clustering import ClusterSummary

log = logging.getLogger(__name__)

VARIANTS = ("default", "neg_ablation", "supcon")
MINORITY, SAMPLED = "minority", "cluster-sampled"


@dataclass
class TaskDataset:
    indices: np.ndarray
    p: int
    provenance: list[str]
    class_counts: dict[int, int]

    def __len__(self):
        return len(self.indices)


def p_from_fraction(n: int, n_classes: int, fraction: float = 0.1) -> int:
    return math.ceil(fraction * n / n_classes)


def _per_cluster_counts(need: int, avail: dict[int, int], eligible: list[int]) -> dict[int, int]:
    q, r = divmod(need, len(eligible))
    # remainder goes to the r clusters with the most class members, lower index first on ties
    by_size = sorted(eligible, key=lambda c: (-avail[c], c))
    want = {c: q + (1 if c in by_size[:r] else 0) for c in eligible}
    take_ = {c: min(want[c], avail[c]) for c in eligible}
    short = need - sum(take_.values())
    while short > 0:
        moved = False
        for c in eligible:
            if short and take_[c] < avail[c]:
                take_[c] += 1
                short -= 1
                moved = True
        if not moved:
            break
    return take_


def build_task_dataset(labels, summary: ClusterSummary, p: int, seed: int = 0) -> TaskDataset:
    """All minority samples of each class topped up to ``p`` with uniform
    draws of that class from its dominant and neutral clusters."""
    y = np.asarray(labels, dtype=np.int64)
    assign = summary.assignments
    rng = np.random.default_rng(seed)
    chosen, prov, counts = [], [], {}
    for i in sorted(summary.dominant):
        m_i = summary.minority[i]
        total_i = int((y == i).sum())
        if p > total_i:
            raise ValueError(f"class {i}: p={p} exceeds the {total_i} available samples")
        if p < len(m_i):
            raise ValueError(f"class {i}: p={p} is smaller than its minority set ({len(m_i)})")
        eligible = sorted(summary.dominant[i] + summary.neutral)
        need = p - len(m_i)
        pools = {c: np.flatnonzero((assign == c) & (y == i)) for c in eligible}
        if need and (not eligible or sum(len(v) for v in pools.values()) < need):
            raise ValueError(f"class {i}: not enough samples outside the minority set to reach p={p}")
        chosen.append(m_i)
        prov += [MINORITY] * len(m_i)
        if need:
            per = _per_cluster_counts(need, {c: len(v) for c, v in pools.items()}, eligible)
            for c in eligible:
                if per[c]:
                    picked = rng.choice(pools[c], per[c], replace=False)
                    chosen.append(np.sort(picked))
                    prov += [SAMPLED] * per[c]
        counts[i] = p
    idx = np.concatenate(chosen) if chosen else np.zeros(0, np.int64)
    return TaskDataset(idx.astype(np.int64), p, prov, counts)


# --- contrastive batches ----------------------------------------------------


@dataclass
class ContrastiveBatch:
    anchors: list[int]
    positives: list[np.ndarray]
    negatives: list[np.ndarray]
    tau: float = 0.1
    variant: str = "default"
    warnings: list[str] = field(default_factory=list)

    def __len__(self):
        return len(self.anchors)

    def records(self) -> list[dict]:
        return [{"anchor": int(a), "positives": p.tolist(), "negatives": q.tolist()}
                for a, p, q in zip(self.anchors, self.positives, self.negatives)]


def _pools(variant, a, y, c, members):
    same_y = y[members] == y[a]
    same_c = c[members] == c[a]
    not_a = members != a
    if variant == "supcon":
        return members[same_y & not_a], members[~same_y]
    pos = members[same_y & ~same_c]
    if variant == "neg_ablation":
        return pos, members[same_c & ~same_y]
    return pos, members[same_c & not_a]


def sample_variant_batch(variant: str, labels, cluster_ids, rng: np.random.Generator, A: int = 8, P: int = 4,
                         N: int = 16, members=None, tau: float = 0.1, max_redraws: int = 10) -> ContrastiveBatch:
    """Draw anchors with their positive and negative index sets.

    ``default``: positives share the class but not the cluster, negatives
    share the cluster. ``neg_ablation`` restricts negatives to other
    classes. ``supcon`` ignores clusters: positives share the class,
    negatives do not. ``members`` limits every pool (and the anchors).
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown contrastive variant {variant!r}")
    y = np.asarray(labels, dtype=np.int64)
    c = np.asarray(cluster_ids, dtype=np.int64)
    members = np.arange(len(y)) if members is None else np.unique(np.asarray(members, dtype=np.int64))
    if members.size == 0:
        raise ValueError("all clusters are empty")
    batch = ContrastiveBatch([], [], [], tau, variant)
    if variant == "supcon":
        starts = [[int(a)] for a in rng.choice(members, min(A, members.size), replace=False)]
        by_cluster = None
    else:
        clusters = np.unique(c[members])
        if A > clusters.size:
            raise ValueError(f"{A} anchors requested but only {clusters.size} non-empty clusters")
        by_cluster = {int(j): members[c[members] == j] for j in clusters}
        starts = [[int(j)] for j in rng.choice(clusters, A, replace=False)]
    for (start,) in starts:
        anchor, pos, neg = None, None, None
        for _ in range(max_redraws + 1):
            a = start if by_cluster is None else int(rng.choice(by_cluster[start]))
            pos, neg = _pools(variant, a, y, c, members)
            if pos.size:
                anchor = a
                break
            if by_cluster is None:
                break
        if anchor is None:
            batch.warnings.append(f"anchor skipped: empty positive pool (cluster {start})"
                                  if by_cluster is not None else f"anchor {start} skipped: empty positive pool")
            continue
        if neg.size == 0:
            batch.warnings.append(f"anchor {anchor}: empty negative pool")
        batch.anchors.append(anchor)
        batch.positives.append(rng.choice(pos, min(P, pos.size), replace=False))
        batch.negatives.append(rng.choice(neg, min(N, neg.size), replace=False) if neg.size else neg[:0])
    for w in batch.warnings:
        log.debug(w)
    return batch


def sample_contrastive_batch(labels, cluster_ids, rng, A=8, P=4, N=16, members=None, tau=0.1) -> ContrastiveBatch:
    return sample_variant_batch("default", labels, cluster_ids, rng, A, P, N, members, tau)


# --- loss -------------------------------------------------------------------


def contrastive_loss(z: Tensor, z_pos: Tensor, z_neg: Tensor | None, tau: float) -> Tensor:
    """-sum_i log(exp(z.z_i+/tau) / (sum_P exp(z.z_p+/tau) + sum_N exp(z.z_n-/tau))).

    ``z`` is one normalised row (shape (d,) or (1, d)); ``z_pos`` is (P, d)
    and ``z_neg`` is (N, d) or None.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    n_pos = z_pos.shape[0]
    if n_pos == 0:
        log.warning("anchor without positives contributes zero loss")
        return Tensor(0.0)
    sims_pos = tsum(z_pos * z, axis=1) / tau
    logits = sims_pos
    if z_neg is not None and z_neg.shape[0]:
        logits = concat([sims_pos, tsum(z_neg * z, axis=1) / tau])
    return logsumexp(logits, axis=0) * float(n_pos) - tsum(sims_pos)


def batch_contrastive_loss(batch: ContrastiveBatch, embeddings: Tensor, tau: float | None = None,
                           rows=None, epsilon: float = 1e-12) -> Tensor:
    """Sum of per-anchor losses over L2-normalised embeddings.

    ``rows`` maps dataset indices to embedding rows (identity by default).
    """
    tau = batch.tau if tau is None else tau
    Z = l2_normalize(embeddings, epsilon)
    row = (lambda idx: np.asarray(idx, dtype=np.int64)) if rows is None else (lambda idx: rows[np.asarray(idx, dtype=np.int64)])
    total = Tensor(0.0)
    for a, pos, neg in zip(batch.anchors, batch.positives, batch.negatives):
        z = take(Z, row([a]))
        zn = take(Z, row(neg)) if len(neg) else None
        total = total + contrastive_loss(z, take(Z, row(pos)), zn, tau)
    return total
