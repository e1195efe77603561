"""Per-class k-means over pooled features with elbow-method model selection.

Groups source videos inside each activity class into interaction clusters;
the resulting counts n_y and n_yj drive the balanced loss weighting. Fits
are order-independent: points are canonically sorted before k-means and
assignments are recomputed as nearest-centroid on the original order.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from sklearn.cluster import KMeans

ELBOW_DROP = 0.10
DEFAULT_K_MAX = 12
_SSE_FLOOR = 1e-12


class ClusterError(ValueError):
    pass


@dataclass
class ClassClusters:
    k: int
    centroids: np.ndarray  # (k, dim)
    counts: np.ndarray     # (k,) samples per cluster


@dataclass
class ClusterModel:
    feature_source: str                     # "audio" | "visual"
    seed: int
    per_class: dict[int, ClassClusters] = field(default_factory=dict)
    assignments: np.ndarray | None = None   # cluster id per source video
    labels: np.ndarray | None = None        # class id per source video

    def counts_for(self, y: int, j: int) -> tuple[int, int]:
        """(n_y, n_yj) for a sample of class y assigned to cluster j."""
        cc = self.per_class[int(y)]
        return int(cc.counts.sum()), int(cc.counts[int(j)])

    def assign(self, y: int, feature: np.ndarray) -> int:
        """Nearest-centroid cluster for a new feature of class y."""
        cc = self.per_class[int(y)]
        d = np.linalg.norm(cc.centroids - feature[None, :], axis=1)
        return int(np.argmin(d))

    def to_csv(self, path, ids=None) -> None:
        import csv

        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["video_id", "class", "cluster"])
            for i, (y, j) in enumerate(zip(self.labels, self.assignments)):
                vid = ids[i] if ids is not None else i
                writer.writerow([vid, int(y), int(j)])


def _nearest(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    d = np.linalg.norm(points[:, None, :] - centroids[None, :, :], axis=2)
    return np.argmin(d, axis=1)


def _sse(points: np.ndarray, centroids: np.ndarray, assign: np.ndarray) -> float:
    return float(((points - centroids[assign]) ** 2).sum())


def kmeans_fit(features, k: int, seed: int) -> tuple[np.ndarray, np.ndarray, float]:
    """k-means++ with 10 restarts, best SSE kept. Returns (centroids, assignments, sse).

    Deterministic given seed and invariant to the input order (points are
    canonically sorted before fitting).
    """
    points = np.asarray(features, dtype=np.float64)
    if points.ndim != 2 or points.shape[0] == 0:
        raise ClusterError(f"expected a nonempty (n, dim) feature array, got shape {points.shape}")
    if k < 1:
        raise ClusterError(f"k must be >= 1, got {k}")
    k_eff = min(k, points.shape[0])
    if k_eff == 1:
        centroids = points.mean(axis=0, keepdims=True)
        assign = np.zeros(points.shape[0], dtype=np.int64)
        return centroids, assign, _sse(points, centroids, assign)
    order = np.lexsort(points.T[::-1])
    km = KMeans(n_clusters=k_eff, init="k-means++", n_init=10, max_iter=300,
                tol=0.0, random_state=seed)
    km.fit(points[order])
    centroids = km.cluster_centers_.astype(np.float64)
    assign = _nearest(points, centroids)
    return centroids, assign, _sse(points, centroids, assign)


def elbow_select(features, k_max: int, seed: int = 0) -> int:
    """Smallest k whose relative SSE drop to k+1 falls below 10%, else k_max."""
    points = np.asarray(features, dtype=np.float64)
    if points.ndim != 2 or points.shape[0] == 0:
        raise ClusterError(f"expected a nonempty (n, dim) feature array, got shape {points.shape}")
    if k_max < 1:
        raise ClusterError(f"k_max must be >= 1, got {k_max}")
    if np.all(points == points[0]):
        return 1
    hi = min(k_max, points.shape[0])
    sse = {}
    for k in range(1, hi + 1):
        sse[k] = kmeans_fit(points, k, seed)[2]
    for k in range(1, hi):
        if sse[k] <= _SSE_FLOOR:
            return k
        if (sse[k] - sse[k + 1]) / sse[k] < ELBOW_DROP:
            return k
    return hi


def fit_interaction_clusters(features, class_labels, *, feature_source: str, seed: int,
                             k_max: int = DEFAULT_K_MAX, fixed_k: int | None = None) -> ClusterModel:
    """Cluster source videos within each class (elbow-selected k unless fixed)."""
    points = np.asarray(features, dtype=np.float64)
    ys = np.asarray(class_labels, dtype=np.int64)
    if points.shape[0] != ys.shape[0]:
        raise ClusterError("features and labels length mismatch")
    model = ClusterModel(feature_source=feature_source, seed=seed,
                         assignments=np.full(ys.shape[0], -1, dtype=np.int64), labels=ys.copy())
    for y in sorted(set(int(v) for v in ys)):
        idx = np.flatnonzero(ys == y)
        pts = points[idx]
        if fixed_k is not None:
            k = max(1, min(fixed_k, pts.shape[0]))
        else:
            k = elbow_select(pts, k_max, seed=seed + y)
        centroids, assign, _ = kmeans_fit(pts, k, seed=seed + y)
        counts = np.bincount(assign, minlength=centroids.shape[0])
        model.per_class[y] = ClassClusters(k=centroids.shape[0], centroids=centroids, counts=counts)
        model.assignments[idx] = assign
    return model


def cluster_stats(model: ClusterModel, class_labels=None) -> dict:
    """Recount (y, j) -> n_yj plus per-class totals n_y from the assignments."""
    ys = np.asarray(class_labels if class_labels is not None else model.labels, dtype=np.int64)
    assign = model.assignments
    if assign is None or np.any(assign < 0):
        raise ClusterError("missing cluster assignment")
    if ys.shape[0] != assign.shape[0]:
        raise ClusterError("labels and assignments length mismatch")
    n_y: dict[int, int] = {}
    n_yj: dict[tuple[int, int], int] = {}
    for y, j in zip(ys, assign):
        n_y[int(y)] = n_y.get(int(y), 0) + 1
        n_yj[(int(y), int(j))] = n_yj.get((int(y), int(j)), 0) + 1
    return {"n_y": n_y, "n_yj": n_yj}
