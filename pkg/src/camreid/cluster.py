"""DBSCAN with a fixed scan order, percentile eps selection, cluster means."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist
from sklearn.utils import check_array

NOISE = -1


@dataclass
class ClusterResult:
    assignments: np.ndarray  # int64, NOISE for unclustered points
    num_clusters: int
    means: np.ndarray  # (num_clusters, dim)
    eps: float
    min_pts: int
    core: np.ndarray  # bool mask of core points

    @property
    def noise_fraction(self) -> float:
        n = len(self.assignments)
        return float((self.assignments == NOISE).sum() / n) if n else 0.0


def pairwise_distances(x: np.ndarray, y: np.ndarray | None = None) -> np.ndarray:
    return cdist(x, x if y is None else y)


def cluster_means(points: np.ndarray, assignments: np.ndarray, num_clusters: int) -> np.ndarray:
    means = np.zeros((num_clusters, points.shape[1]), dtype=points.dtype)
    for c in range(num_clusters):
        means[c] = points[assignments == c].mean(0)
    return means


def dbscan(points, eps: float, min_pts: int) -> ClusterResult:
    """Density clustering over Euclidean distance.

    A core point has at least ``min_pts`` points (itself included) within ``eps``. Clusters
    grow breadth-first from unvisited core points in index order; a border point joins the
    first cluster that reaches it.
    """
    if eps <= 0 or min_pts < 1:
        raise ValueError("need eps > 0 and min_pts >= 1")
    points = np.asarray(points, dtype=np.float64)
    if points.size == 0:
        dim = points.shape[1] if points.ndim == 2 else 0
        return ClusterResult(np.zeros(0, np.int64), 0, np.zeros((0, dim)), eps, min_pts, np.zeros(0, bool))
    points = check_array(points)
    n = len(points)
    d = pairwise_distances(points)
    neighbors = [np.flatnonzero(row <= eps) for row in d]
    core = np.array([len(nb) >= min_pts for nb in neighbors])
    labels = np.full(n, NOISE, dtype=np.int64)
    c = 0
    for i in range(n):
        if not core[i] or labels[i] != NOISE:
            continue
        labels[i] = c
        queue = deque([i])
        while queue:
            p = queue.popleft()
            for q in neighbors[p]:
                if labels[q] == NOISE:
                    labels[q] = c
                    if core[q]:
                        queue.append(q)
        c += 1
    return ClusterResult(labels, c, cluster_means(points, labels, c), float(eps), int(min_pts), core)


def select_eps(points, percentile: float, max_points: int = 2000, seed: int = 0) -> float:
    """Given percentile of the pairwise-distance distribution (distinct pairs).

    Above ``max_points`` a fixed-seed subsample is used.
    """
    if not 0 < percentile < 100:
        raise ValueError("percentile must be in (0, 100)")
    points = check_array(np.asarray(points, dtype=np.float64))
    if len(points) < 2:
        raise ValueError("select_eps needs at least two points")
    if len(points) > max_points:
        idx = np.random.default_rng(seed).choice(len(points), max_points, replace=False)
        points = points[np.sort(idx)]
    iu = np.triu_indices(len(points), k=1)
    dists = pairwise_distances(points)[iu]
    eps = float(np.percentile(dists, percentile, method="lower"))
    if eps <= 0:
        raise ValueError("degenerate point set: selected eps is 0")
    return eps
