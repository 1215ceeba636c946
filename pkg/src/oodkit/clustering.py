"""Per-cell clustering regimes for centroid banks.

Four regimes: a single mean, k-means with silhouette-selected k, k-means
with a forced cluster count, and a density clusterer built on mutual
reachability (core distances, a minimum spanning tree, and a cut at the
largest persistence gap). Assignments use -1 for noise; every centroid is
the arithmetic mean of its members. All randomness flows from the seed in
:class:`ClusterSpec`.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist

from oodkit.errors import (
    AllNoiseError,
    ConfigError,
    InsufficientSamplesError,
    UndefinedMetricError,
    ZeroVectorError,
)

METRICS = ("l1", "l2", "cosine")
_CDIST_NAMES = {"l1": "cityblock", "l2": "euclidean", "cosine": "cosine"}

# Below this many points silhouette selection is skipped and the smallest
# grid value is used directly.
SILHOUETTE_MIN_SAMPLES = 20


def _check_metric(distance: str) -> str:
    if distance not in METRICS:
        raise ConfigError(f"unknown distance metric {distance!r}, expected one of {METRICS}")
    return _CDIST_NAMES[distance]


def pairwise_distances(points_a: np.ndarray, points_b: np.ndarray, distance: str) -> np.ndarray:
    """Distance matrix between two point sets under the named metric."""
    name = _check_metric(distance)
    a = np.atleast_2d(np.asarray(points_a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(points_b, dtype=np.float64))
    if distance == "cosine":
        for arr, label in ((a, "first"), (b, "second")):
            norms = np.linalg.norm(arr, axis=1)
            if np.any(norms == 0.0):
                raise ZeroVectorError(f"cosine distance undefined for zero vector in {label} set")
    return cdist(a, b, name)


@dataclass
class ClusterSpec:
    method: str = "one"  # one | kmeans | kmeans_forced | density
    k_grid: tuple[int, ...] = tuple(range(2, 11))
    forced_k: int = 10
    min_cluster_size_grid: tuple[int, ...] = (5, 10, 15)
    seed: int = 0
    max_iters: int = 300
    tol: float = 1e-6  # relative centroid movement


@dataclass
class ClusterResult:
    centroids: np.ndarray  # (clusters, dim)
    assignments: np.ndarray  # (points,), -1 marks noise
    silhouette: float | None
    method_used: str
    degenerate: bool = False
    objective_history: list[float] = field(default_factory=list)


def _squared_distances(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    diff = points[:, None, :] - centroids[None, :, :]
    return np.einsum("nkd,nkd->nk", diff, diff)


def _kmeans_pp_init(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(points)
    centroids = np.empty((k, points.shape[1]), dtype=np.float64)
    centroids[0] = points[rng.integers(n)]
    d2 = np.sum((points - centroids[0]) ** 2, axis=1)
    for i in range(1, k):
        total = d2.sum()
        if total > 0.0:
            idx = int(rng.choice(n, p=d2 / total))
        else:
            idx = int(rng.integers(n))  # all remaining mass on already-chosen values
        centroids[i] = points[idx]
        d2 = np.minimum(d2, np.sum((points - centroids[i]) ** 2, axis=1))
    return centroids


def kmeans(
    points: np.ndarray,
    k: int,
    seed: int = 0,
    max_iters: int = 300,
    tol: float = 1e-6,
) -> ClusterResult:
    """Lloyd iterations from k-means++ seeding (assignment is always L2).

    Empty clusters are re-seeded from the point farthest from its assigned
    centroid. The objective history records the within-cluster sum of
    squares at each assignment step.
    """
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    if n < k:
        raise InsufficientSamplesError(f"{n} points cannot form {k} clusters")
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    rng = np.random.default_rng(seed)
    centroids = _kmeans_pp_init(points, k, rng)
    assignments = np.zeros(n, dtype=np.int64)
    history: list[float] = []
    for _ in range(max_iters):
        d2 = _squared_distances(points, centroids)
        assignments = d2.argmin(axis=1)
        point_d2 = d2[np.arange(n), assignments]
        history.append(float(point_d2.sum()))
        new_centroids = centroids.copy()
        for m in range(k):
            members = assignments == m
            if members.any():
                new_centroids[m] = points[members].mean(axis=0)
        remaining = point_d2.copy()
        for m in range(k):
            if not (assignments == m).any():
                far = int(np.argmax(remaining))
                new_centroids[m] = points[far]
                remaining[far] = 0.0
        shift = np.linalg.norm(new_centroids - centroids, axis=1).max()
        scale = max(1.0, float(np.linalg.norm(centroids, axis=1).max()))
        centroids = new_centroids
        if shift <= tol * scale:
            break
    degenerate = len({tuple(c) for c in centroids}) < k
    return ClusterResult(
        centroids=centroids,
        assignments=assignments,
        silhouette=None,
        method_used=f"kmeans[k={k}]",
        degenerate=degenerate,
        objective_history=history,
    )


def silhouette_score(points: np.ndarray, assignments: np.ndarray, distance: str) -> float:
    """Mean silhouette over non-noise points.

    Singleton clusters contribute a = 0 for their point; a point with
    a = b = 0 scores 0. Fewer than two populated clusters is undefined.
    """
    points = np.asarray(points, dtype=np.float64)
    assignments = np.asarray(assignments)
    mask = assignments >= 0
    pts = points[mask]
    labels = assignments[mask]
    unique = np.unique(labels)
    if len(unique) < 2:
        raise UndefinedMetricError(
            f"silhouette needs >= 2 populated clusters, got {len(unique)}"
        )
    dist = pairwise_distances(pts, pts, distance)
    scores = np.empty(len(pts), dtype=np.float64)
    members = {int(c): labels == c for c in unique}
    for i in range(len(pts)):
        own = members[int(labels[i])]
        same = dist[i, own]
        a = same.sum() / (own.sum() - 1) if own.sum() > 1 else 0.0
        b = min(dist[i, members[int(c)]].mean() for c in unique if c != labels[i])
        denom = max(a, b)
        scores[i] = (b - a) / denom if denom > 0.0 else 0.0
    return float(scores.mean())


def _prim_mst(weights: np.ndarray) -> list[tuple[int, int, float]]:
    """Prim's algorithm on a dense symmetric weight matrix.

    Hand-rolled so zero-weight edges (duplicate points) stay real edges.
    """
    n = weights.shape[0]
    in_tree = np.zeros(n, dtype=bool)
    in_tree[0] = True
    best = weights[0].copy()
    best_from = np.zeros(n, dtype=np.int64)
    edges = []
    for _ in range(n - 1):
        cand = np.where(in_tree, np.inf, best)
        j = int(np.argmin(cand))
        edges.append((int(best_from[j]), j, float(best[j])))
        in_tree[j] = True
        closer = weights[j] < best
        best_from[closer] = j
        best = np.minimum(best, weights[j])
    return edges


def density_cluster(points: np.ndarray, min_cluster_size: int, distance: str) -> ClusterResult:
    """Mutual-reachability clustering with a single persistence-gap cut.

    Core distance is the distance to the min_cluster_size-th neighbor;
    mutual reachability of a pair is the max of both core distances and
    their direct distance. The MST over that graph is cut above the edge
    weight preceding the largest gap in sorted edge weights; components
    smaller than min_cluster_size become noise.
    """
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    if min_cluster_size < 2:
        raise ConfigError(f"min_cluster_size must be >= 2, got {min_cluster_size}")
    if n < min_cluster_size:
        raise InsufficientSamplesError(
            f"{n} points < min_cluster_size {min_cluster_size}"
        )
    dist = pairwise_distances(points, points, distance)
    k = min(min_cluster_size, n - 1)
    core = np.sort(dist, axis=1)[:, k]
    mreach = np.maximum(dist, np.maximum(core[:, None], core[None, :]))
    np.fill_diagonal(mreach, 0.0)
    edges = _prim_mst(mreach)

    weights = np.array(sorted(e[2] for e in edges))
    cut_above = np.inf
    if len(weights) >= 2:
        gaps = np.diff(weights)
        g = int(np.argmax(gaps))
        if gaps[g] > 0.0:
            cut_above = float(weights[g])

    parent = list(range(n))

    def find(x: int) -> int:
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for a, b, w in edges:
        if w <= cut_above:
            parent[find(a)] = find(b)

    roots = np.array([find(i) for i in range(n)])
    assignments = np.full(n, -1, dtype=np.int64)
    next_label = 0
    for root in dict.fromkeys(roots.tolist()):  # first-occurrence order
        component = roots == root
        if component.sum() >= min_cluster_size:
            assignments[component] = next_label
            next_label += 1
    if next_label == 0:
        raise AllNoiseError(
            f"all {n} points labelled noise at min_cluster_size {min_cluster_size}"
        )
    centroids = np.stack(
        [points[assignments == m].mean(axis=0) for m in range(next_label)]
    )
    silhouette = None
    if next_label >= 2:
        silhouette = silhouette_score(points, assignments, distance)
    return ClusterResult(
        centroids=centroids,
        assignments=assignments,
        silhouette=silhouette,
        method_used=f"density[mcs={min_cluster_size}]",
    )


def _one_cluster(points: np.ndarray) -> ClusterResult:
    points = np.asarray(points, dtype=np.float64)
    return ClusterResult(
        centroids=points.mean(axis=0, keepdims=True),
        assignments=np.zeros(len(points), dtype=np.int64),
        silhouette=None,
        method_used="one",
    )


def _fit_kmeans_grid(points: np.ndarray, spec: ClusterSpec, distance: str) -> ClusterResult:
    n = len(points)
    viable = [k for k in spec.k_grid if k <= n]
    if not viable:
        raise InsufficientSamplesError(
            f"{n} points < smallest grid value {min(spec.k_grid)}"
        )
    if n < SILHOUETTE_MIN_SAMPLES:
        return kmeans(points, min(viable), spec.seed, spec.max_iters, spec.tol)
    best: ClusterResult | None = None
    best_sil = -np.inf
    fallback: ClusterResult | None = None
    for k in viable:
        result = kmeans(points, k, spec.seed, spec.max_iters, spec.tol)
        if fallback is None:
            fallback = result
        try:
            sil = silhouette_score(points, result.assignments, distance)
        except UndefinedMetricError:
            continue
        result.silhouette = sil
        if sil > best_sil:
            best, best_sil = result, sil
    return best if best is not None else fallback


def _fit_density_grid(points: np.ndarray, spec: ClusterSpec, distance: str) -> ClusterResult:
    n = len(points)
    viable = [m for m in spec.min_cluster_size_grid if m <= n]
    if not viable:
        raise InsufficientSamplesError(
            f"{n} points < smallest min_cluster_size {min(spec.min_cluster_size_grid)}"
        )
    if n < SILHOUETTE_MIN_SAMPLES:
        viable = [min(viable)]
    candidates: list[ClusterResult] = []
    for m in viable:
        try:
            candidates.append(density_cluster(points, m, distance))
        except AllNoiseError:
            continue
    if not candidates:
        raise AllNoiseError(f"every min_cluster_size in {viable} left only noise")
    scored = [c for c in candidates if c.silhouette is not None]
    if scored:
        return max(scored, key=lambda c: c.silhouette)
    return candidates[0]


def fit_clusters(points: np.ndarray, spec: ClusterSpec, distance: str) -> ClusterResult:
    """Dispatch to the regime named by ``spec.method``.

    Grid selections score candidates by silhouette under the same metric
    later used for scoring; ties keep the smaller grid value.
    """
    _check_metric(distance)
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or len(points) == 0:
        raise InsufficientSamplesError("clustering needs a non-empty (n, dim) array")
    if spec.method == "one":
        return _one_cluster(points)
    if spec.method == "kmeans":
        return _fit_kmeans_grid(points, spec, distance)
    if spec.method == "kmeans_forced":
        if len(points) < spec.forced_k:
            raise InsufficientSamplesError(
                f"{len(points)} points < forced cluster count {spec.forced_k}"
            )
        result = kmeans(points, spec.forced_k, spec.seed, spec.max_iters, spec.tol)
        result.method_used = f"kmeans_forced[k={spec.forced_k}]"
        return result
    if spec.method == "density":
        return _fit_density_grid(points, spec, distance)
    raise ConfigError(f"unknown clustering method {spec.method!r}")
