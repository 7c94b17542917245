"""Pre-training stage: 2-means over (log duration, swath severity) space."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Sequence

import numpy as np

if TYPE_CHECKING:
    from .data import EventDataset

SIGNIFICANT = 1
LESS = 2

SOURCE_KMEANS = "kmeans"
SOURCE_INFERRED = "inferred"
SOURCE_UNSET = "unset"

DURATION_EPS_DAYS = 1.0 / 24.0
SWATH_WEIGHTS = (1.0, 2.0, 3.0)  # 34-49, 50-63, 64+ knot bands


class ClusteringError(ValueError):
    pass


@dataclass
class KmeansResult:
    assignments: np.ndarray
    centroids: np.ndarray
    inertia: float
    iterations: int
    inertia_history: list[float] = field(default_factory=list)


def _sq_dists(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    diff = points[:, None, :] - centroids[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def _plusplus_seed(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(points)
    chosen = [int(rng.integers(n))]
    d2 = _sq_dists(points, points[chosen]).min(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total > 0:
            nxt = int(rng.choice(n, p=d2 / total))
        else:
            nxt = int(rng.integers(n))
        chosen.append(nxt)
        d2 = np.minimum(d2, _sq_dists(points, points[[nxt]])[:, 0])
    return points[chosen].copy()


def _lloyd(points: np.ndarray, centroids: np.ndarray, max_iter: int) -> KmeansResult:
    k = len(centroids)
    assign = None
    history: list[float] = []
    it = 0
    for it in range(1, max_iter + 1):
        d2 = _sq_dists(points, centroids)
        new = d2.argmin(axis=1)
        counts = np.bincount(new, minlength=k)
        for j in np.flatnonzero(counts == 0):
            # move the worst-served point (from a cluster that can spare it) into the empty one
            own = d2[np.arange(len(points)), new]
            donors = counts[new] > 1
            cand = np.flatnonzero(donors)
            p = int(cand[np.argmax(own[cand])])
            counts[new[p]] -= 1
            new[p] = j
            counts[j] = 1
            centroids[j] = points[p]
        for j in range(k):
            centroids[j] = points[new == j].mean(axis=0)
        inertia = float(((points - centroids[new]) ** 2).sum())
        history.append(inertia)
        if assign is not None and np.array_equal(new, assign):
            break
        assign = new
    return KmeansResult(new, centroids, history[-1], it, history)


def kmeans(points, k: int = 2, restarts: int = 10, max_iter: int = 300, seed: int = 0) -> KmeansResult:
    """Lloyd's algorithm with k-means++ seeding; best inertia over ``restarts`` runs."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim == 1:
        pts = pts[:, None]
    if k < 1:
        raise ClusteringError("k must be at least 1")
    if len(pts) < k:
        raise ClusteringError(f"need at least k={k} points, got {len(pts)}")
    if not np.all(np.isfinite(pts)):
        raise ClusteringError("points contain non-finite coordinates")
    best = None
    for child in np.random.SeedSequence(seed).spawn(max(1, restarts)):
        rng = np.random.default_rng(child)
        res = _lloyd(pts, _plusplus_seed(pts, k, rng), max_iter)
        # strict < keeps the earliest restart on ties
        if best is None or res.inertia < best.inertia:
            best = res
    return best


def swath_severity(features: np.ndarray) -> np.ndarray:
    from .data import SWATH_COLUMNS
    fr = np.asarray(features)[:, list(SWATH_COLUMNS[1:])]
    return fr @ np.array(SWATH_WEIGHTS)


def _zscore(col: np.ndarray) -> np.ndarray:
    sd = col.std()
    return (col - col.mean()) / (sd if sd > 1e-12 else 1.0)


def severity_features(dataset: "EventDataset", node_set) -> np.ndarray:
    """(log duration, band-weighted swath severity) per node, each z-scored over ``node_set``."""
    idx = np.asarray(node_set, dtype=np.intp)
    days = dataset.duration_days[idx]
    if np.any(np.isnan(days)):
        bad = idx[np.isnan(days)][:5].tolist()
        raise ClusteringError(f"nodes without a duration label: {bad}")
    log_dur = np.log(days + DURATION_EPS_DAYS)
    sev = swath_severity(dataset.features[idx])
    return np.column_stack([_zscore(log_dur), _zscore(sev)])


@dataclass
class ClusterAssignment:
    labels: np.ndarray  # 1, 2, or 0 when unset
    source: np.ndarray  # SOURCE_* strings
    centroids: np.ndarray | None = None

    @classmethod
    def empty(cls, n: int) -> "ClusterAssignment":
        return cls(np.zeros(n, dtype=np.int64), np.full(n, SOURCE_UNSET, dtype=object))

    @property
    def n(self) -> int:
        return len(self.labels)

    def is_complete(self) -> bool:
        return bool(np.all(self.source != SOURCE_UNSET))

    def copy(self) -> "ClusterAssignment":
        c = None if self.centroids is None else self.centroids.copy()
        return ClusterAssignment(self.labels.copy(), self.source.copy(), c)


def canonical_order(centroids: np.ndarray) -> tuple[int, int]:
    """Indices (significant, less): higher duration wins; ties go to higher severity."""
    if len(centroids) != 2:
        raise ClusteringError(f"bimodal embedding needs k=2, got k={len(centroids)}")
    a, b = centroids[0], centroids[1]
    if a[0] != b[0]:
        return (0, 1) if a[0] > b[0] else (1, 0)
    return (0, 1) if a[1] >= b[1] else (1, 0)


def assign_clusters(result: KmeansResult, node_set: Sequence[int], n: int) -> ClusterAssignment:
    """Canonically relabel a k=2 result over ``node_set`` into an n-node assignment."""
    idx = np.asarray(node_set, dtype=np.intp)
    if len(result.centroids) != 2:
        raise ClusteringError(f"bimodal embedding needs k=2, got k={len(result.centroids)}")
    if len(result.assignments) != len(idx):
        raise ClusteringError("k-means result does not match the node set")
    hi, lo = canonical_order(result.centroids)
    out = ClusterAssignment.empty(n)
    out.labels[idx] = np.where(result.assignments == hi, SIGNIFICANT, LESS)
    out.source[idx] = SOURCE_KMEANS
    out.centroids = result.centroids[[hi, lo]].copy()
    return out


def cluster_nodes(dataset: "EventDataset", node_set, restarts: int = 10, seed: int = 0) -> ClusterAssignment:
    pts = severity_features(dataset, node_set)
    return assign_clusters(kmeans(pts, 2, restarts=restarts, seed=seed), node_set, dataset.n)


def adjusted_rand_index(a, b) -> float:
    a = np.asarray(a)
    b = np.asarray(b)
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    table = np.zeros((ai.max() + 1, bi.max() + 1))
    np.add.at(table, (ai, bi), 1)

    def pairs(x):
        return (x * (x - 1) / 2.0).sum()

    n = len(a)
    sum_ij = pairs(table)
    sum_a = pairs(table.sum(axis=1))
    sum_b = pairs(table.sum(axis=0))
    expected = sum_a * sum_b / (n * (n - 1) / 2.0) if n > 1 else 0.0
    maximum = 0.5 * (sum_a + sum_b)
    if maximum == expected:
        return 1.0
    return float((sum_ij - expected) / (maximum - expected))
