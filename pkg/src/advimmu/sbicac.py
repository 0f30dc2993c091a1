"""Similarity-based iterative cluster assignment and centroid refinement.

Each iteration scores every row of ``X`` against every centroid by inner
product, assigns rows to the highest score (ties go to the lowest cluster
index), recomputes centroids as member means and stops once the new centroids
are ``allclose`` to the old ones. Unlike k-means there is no distance term, so
large-norm centroids attract more points; nothing normalizes the features.

A cluster that receives no rows is reseeded to the row whose best similarity
to any current centroid is smallest.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

ATOL = 1e-8
RTOL = 1e-5


@dataclass
class ClusterResult:
    labels: np.ndarray
    centroids: np.ndarray
    iterations: int
    converged: bool
    # (centroids used for the assignment, labels) per iteration, when recorded
    history: list[tuple[np.ndarray, np.ndarray]] = field(default_factory=list)


def _check_features(x: np.ndarray, n_clusters: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] < 1:
        raise ValueError(f"features must be an N x D matrix with D >= 1, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("features contain non-finite values")
    if n_clusters < 1:
        raise ValueError(f"n_clusters must be >= 1, got {n_clusters}")
    if n_clusters > x.shape[0]:
        raise ValueError(f"n_clusters={n_clusters} exceeds the number of rows ({x.shape[0]})")
    return x


def init_centroids(x: np.ndarray, n_clusters: int, seed=0) -> np.ndarray:
    """``n_clusters`` distinct rows of ``x`` drawn uniformly without replacement.

    Falls back to sampling (some) duplicate rows, with a ``RuntimeWarning``, when
    ``x`` has fewer distinct rows than clusters.
    """
    x = _check_features(x, n_clusters)
    rng = np.random.default_rng(seed)
    _, first = np.unique(x, axis=0, return_index=True)
    first = np.sort(first)
    if first.size >= n_clusters:
        pick = rng.permutation(first)[:n_clusters]
    else:
        warnings.warn(
            f"only {first.size} distinct rows for {n_clusters} clusters; centroids will repeat",
            RuntimeWarning,
            stacklevel=2,
        )
        extra = rng.choice(x.shape[0], size=n_clusters - first.size, replace=False)
        pick = np.concatenate([rng.permutation(first), extra])
    return x[pick].copy()


def assign(x: np.ndarray, centroids: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Argmax inner-product assignment (first maximum wins). Returns (labels, similarity)."""
    sim = x @ centroids.T
    return sim.argmax(axis=1), sim


def update_centroids(x: np.ndarray, labels: np.ndarray, n_clusters: int, sim: np.ndarray) -> np.ndarray:
    counts = np.bincount(labels, minlength=n_clusters).astype(np.float64)
    sums = np.zeros((n_clusters, x.shape[1]))
    np.add.at(sums, labels, x)
    new = np.empty_like(sums)
    filled = counts > 0
    new[filled] = sums[filled] / counts[filled, None]
    empty = np.flatnonzero(~filled)
    if empty.size:
        # farthest rows first: smallest best-similarity, ties by row index
        order = np.argsort(sim.max(axis=1), kind="stable")
        new[empty] = x[order[: empty.size]]
    return new


def sbicac_cluster(
    x: np.ndarray,
    n_clusters: int,
    init: np.ndarray | None = None,
    max_iter: int = 100,
    seed=0,
    atol: float = ATOL,
    rtol: float = RTOL,
    record: bool = False,
) -> ClusterResult:
    """Cluster the rows of ``x``; ``init`` defaults to ``init_centroids(x, n_clusters, seed)``.

    The returned centroids are the member means of the final assignment.
    """
    x = _check_features(x, n_clusters)
    if max_iter < 1:
        raise ValueError(f"max_iter must be >= 1, got {max_iter}")
    centroids = init_centroids(x, n_clusters, seed) if init is None else np.array(init, dtype=np.float64)
    if centroids.shape != (n_clusters, x.shape[1]):
        raise ValueError(f"init has shape {centroids.shape}, expected {(n_clusters, x.shape[1])}")
    history = []
    converged = False
    it = 0
    labels = np.zeros(x.shape[0], dtype=np.int64)
    new = centroids
    for it in range(1, max_iter + 1):
        labels, sim = assign(x, centroids)
        if record:
            history.append((centroids.copy(), labels.copy()))
        new = update_centroids(x, labels, n_clusters, sim)
        if np.allclose(new, centroids, rtol=rtol, atol=atol):
            converged = True
            break
        centroids = new
    return ClusterResult(labels.astype(np.int64), new, it, converged, history)


def objective(x: np.ndarray, result: ClusterResult) -> float:
    """Summed similarity of every row to its own centroid (higher is better).

    With mean centroids this equals sum_j |X_j| * |c_j|^2, i.e. total squared
    norm minus the within-cluster sum of squares.
    """
    return float(np.einsum("ij,ij->", x, result.centroids[result.labels]))


def sbicac_restarts(x: np.ndarray, n_clusters: int, restarts: int = 1, max_iter: int = 100, seed=0) -> ClusterResult:
    """Best of ``restarts`` randomly initialized runs by ``objective``; seeds are ``[seed, r]``.

    A single restart is exactly ``sbicac_cluster(x, n_clusters, seed=seed)``.
    """
    if restarts < 1:
        raise ValueError(f"restarts must be >= 1, got {restarts}")
    x = _check_features(x, n_clusters)
    if restarts == 1:
        return sbicac_cluster(x, n_clusters, max_iter=max_iter, seed=seed)
    best, best_obj = None, -np.inf
    for r in range(restarts):
        res = sbicac_cluster(x, n_clusters, max_iter=max_iter, seed=[int(seed), r])
        obj = objective(x, res)
        if obj > best_obj:
            best, best_obj = res, obj
    return best


def segments_to_features(image: np.ndarray, instances: np.ndarray) -> np.ndarray:
    """Per-pixel features (H*W x 5): the pixel's instance mean RGB and instance centroid x/W, y/H.

    ``instances`` is an H x W map of non-negative instance ids; by construction
    an id map partitions the grid, so the check is on shape and id validity.
    """
    image = np.asarray(image, dtype=np.float64)
    inst = np.asarray(instances)
    h, w = inst.shape
    if image.shape[:2] != (h, w):
        raise ValueError(f"masks {inst.shape} do not cover image {image.shape[:2]}")
    if not np.issubdtype(inst.dtype, np.integer) or inst.min() < 0:
        raise ValueError("instance masks must be non-negative integer ids")
    ids = inst.reshape(-1)
    n = int(ids.max()) + 1
    counts = np.bincount(ids, minlength=n).astype(np.float64)
    safe = np.maximum(counts, 1.0)
    ys, xs = np.mgrid[0:h, 0:w]
    cols = [image[..., c].reshape(-1) for c in range(3)] + [xs.reshape(-1) / w, ys.reshape(-1) / h]
    means = np.stack([np.bincount(ids, weights=v, minlength=n) / safe for v in cols], axis=1)
    return means[ids]


def labels_to_classmap(labels: np.ndarray, height: int, width: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.size != height * width:
        raise ValueError(f"{labels.size} labels cannot fill a {height}x{width} map")
    return labels.reshape(height, width).astype(np.int64)
