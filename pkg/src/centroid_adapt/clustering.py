"""Lloyd k-means with k-means++ seeding and single-point refinement, plus
cluster-to-class labeling."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import ConfigError, LabelingError, ParseError, ShapeError

CENTROID_FILE_VERSION = 1


@dataclass
class PointSet:
    points: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.atleast_2d(np.asarray(self.points, dtype=np.float64))
        if not np.isfinite(self.points).all():
            raise ValueError("point set contains non-finite values")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=int)
            if self.labels.shape != (len(self.points),):
                raise ShapeError(f"{len(self.labels)} labels for {len(self.points)} points")
            if self.labels.size and self.labels.min() < 0:
                raise LabelingError("labels must be non-negative")

    def __len__(self) -> int:
        return len(self.points)


@dataclass
class CentroidSet:
    """Centroids in cluster order plus the cluster -> class mapping.

    ``assignments`` and ``history`` are only filled by :func:`kmeans_fit`.
    """

    centroids: np.ndarray
    class_of_cluster: np.ndarray
    inertia: float = 0.0
    assignments: np.ndarray | None = field(default=None, repr=False)
    history: list[float] = field(default_factory=list, repr=False)

    def __post_init__(self):
        self.centroids = np.atleast_2d(np.asarray(self.centroids, dtype=np.float64))
        self.class_of_cluster = np.asarray(self.class_of_cluster, dtype=int)
        k = len(self.centroids)
        if sorted(self.class_of_cluster.tolist()) != list(range(k)):
            raise LabelingError(f"class_of_cluster {self.class_of_cluster.tolist()} is not a permutation of 0..{k - 1}")

    @property
    def k(self) -> int:
        return len(self.centroids)

    @property
    def n(self) -> int:
        return self.centroids.shape[1]

    def by_class(self) -> np.ndarray:
        """Centroid matrix whose row i belongs to class i."""
        out = np.empty_like(self.centroids)
        out[self.class_of_cluster] = self.centroids
        return out


def _sq_dists(X: np.ndarray, C: np.ndarray) -> np.ndarray:
    diff = X[:, None, :] - C[None, :, :]
    return np.einsum("mkn,mkn->mk", diff, diff)


def _means(X: np.ndarray, assign: np.ndarray, fallback: np.ndarray) -> np.ndarray:
    C = fallback.copy()
    for j in range(len(C)):
        members = assign == j
        if members.any():
            C[j] = X[members].mean(axis=0)
    return C


def kmeans_plusplus(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    M = len(X)
    idx = [int(rng.integers(M))]
    d2 = _sq_dists(X, X[idx]).min(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total > 0:
            nxt = int(rng.choice(M, p=d2 / total))
        else:
            # all points coincide with chosen seeds
            nxt = int(rng.integers(M))
        idx.append(nxt)
        d2 = np.minimum(d2, _sq_dists(X, X[[nxt]])[:, 0])
    return X[idx].copy()


def lloyd(X: np.ndarray, centroids: np.ndarray, max_iter: int = 300, tol: float = 0.0):
    """Lloyd iterations from the given centroids.

    Stops at an assignment fixpoint, when the inertia decrease falls below
    ``tol``, or after ``max_iter`` updates.  Returns ``(centroids,
    assignments, inertia, history)``; ``history`` holds the inertia after
    every assignment step and is non-increasing.
    """
    C = centroids.copy()
    rows = np.arange(len(X))
    history: list[float] = []
    prev = None
    for _ in range(max_iter + 1):
        d2 = _sq_dists(X, C)
        assign = d2.argmin(axis=1)
        point_d = d2[rows, assign]
        history.append(float(point_d.sum()))
        if prev is not None and (np.array_equal(assign, prev) or history[-2] - history[-1] < tol):
            break
        if len(history) > max_iter:
            break
        prev = assign
        point_d = point_d.copy()
        for j in range(len(C)):
            members = assign == j
            if members.any():
                C[j] = X[members].mean(axis=0)
            else:
                # empty cluster: move it onto the worst-served point
                far = int(point_d.argmax())
                C[j] = X[far]
                point_d[far] = 0.0
    return C, assign, history[-1], history


def hartigan_refine(X: np.ndarray, assign: np.ndarray, k: int, max_passes: int = 100):
    """Single-point transfers that lower the inertia, until none is left.

    Moving point x from cluster a (size n_a > 1) to b changes the inertia by
    ``n_b/(n_b+1) |x-c_b|^2 - n_a/(n_a-1) |x-c_a|^2``; the best strictly
    negative move is taken.  Lloyd fixpoints can still admit such moves, and
    every refined partition is again a Lloyd fixpoint.  Returns
    ``(centroids, assignments, history)`` with the inertia after each pass.
    """
    assign = assign.copy()
    counts = np.bincount(assign, minlength=k).astype(float)
    C = np.zeros((k, X.shape[1]))
    np.add.at(C, assign, X)
    C /= np.maximum(counts, 1.0)[:, None]
    history: list[float] = []
    for _ in range(max_passes):
        moved = False
        for i in range(len(X)):
            a = assign[i]
            if counts[a] <= 1:
                continue
            d2 = ((C - X[i]) ** 2).sum(axis=1)
            gain_out = counts[a] / (counts[a] - 1.0) * d2[a]
            cost_in = counts / (counts + 1.0) * d2
            cost_in[a] = np.inf
            b = int(cost_in.argmin())
            # relative margin keeps rounding noise from triggering moves
            if cost_in[b] < gain_out * (1.0 - 1e-12) - 1e-300:
                C[a] = (C[a] * counts[a] - X[i]) / (counts[a] - 1.0)
                C[b] = (C[b] * counts[b] + X[i]) / (counts[b] + 1.0)
                counts[a] -= 1.0
                counts[b] += 1.0
                assign[i] = b
                moved = True
        # exact means, free of incremental drift
        C = np.zeros_like(C)
        np.add.at(C, assign, X)
        C /= np.maximum(counts, 1.0)[:, None]
        history.append(float(((X - C[assign]) ** 2).sum()))
        if not moved:
            break
    return C, assign, history


def kmeans_fit(
    data: PointSet | np.ndarray,
    k: int,
    seed: int = 0,
    max_iter: int = 300,
    tol: float = 0.0,
    n_init: int = 10,
    refine: bool = True,
) -> CentroidSet:
    """Best-of-``n_init`` k-means++ / Lloyd runs (ties go to the earliest run).

    With ``refine`` each Lloyd result is polished by :func:`hartigan_refine`
    and then re-run through Lloyd, so the result is a fixpoint of both.

    The returned ``class_of_cluster`` is the identity; use
    :func:`label_clusters` to attach classes.
    """
    X = data.points if isinstance(data, PointSet) else PointSet(data).points
    M = len(X)
    if k < 1 or k > M:
        raise ConfigError(f"k must satisfy 1 <= k <= M (k={k}, M={M})")
    if n_init < 1:
        raise ConfigError("n_init must be >= 1")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(n_init):
        init = kmeans_plusplus(X, k, rng)
        C, assign, inertia, hist = lloyd(X, init, max_iter, tol)
        if refine and k > 1:
            _, assign, _ = hartigan_refine(X, assign, k)
            C, assign, inertia, tail = lloyd(X, _means(X, assign, C), max_iter, tol)
            # inertias in the log all come from the same Lloyd computation
            hist = hist + tail
        if best is None or inertia < best[2]:
            best = (C, assign, inertia, hist)
    C, assign, inertia, hist = best
    return CentroidSet(C, np.arange(k), inertia, assign, hist)


def contingency(assignments: np.ndarray, labels: np.ndarray, k: int) -> np.ndarray:
    """``counts[cluster, class]`` membership table."""
    table = np.zeros((k, k), dtype=int)
    np.add.at(table, (assignments, labels), 1)
    return table


def assign_points(model: CentroidSet, points: np.ndarray) -> np.ndarray:
    return _sq_dists(np.atleast_2d(points), model.centroids).argmin(axis=1)


def label_clusters(model: CentroidSet, data: PointSet) -> CentroidSet:
    """Attach classes to clusters by maximum total member/label agreement."""
    if data.labels is None:
        raise LabelingError("labeling requires labeled points")
    k = model.k
    distinct = np.unique(data.labels)
    if len(distinct) < k:
        raise LabelingError(f"{len(distinct)} distinct labels for {k} clusters")
    if len(distinct) > k or distinct.max() >= k:
        raise LabelingError(f"labels {distinct.tolist()} do not match cluster count {k}")
    assign = assign_points(model, data.points)
    table = contingency(assign, data.labels, k)
    rows, cols = linear_sum_assignment(table, maximize=True)
    class_of_cluster = np.empty(k, dtype=int)
    class_of_cluster[rows] = cols
    return replace(model, class_of_cluster=class_of_cluster, assignments=assign)


def agreement(model: CentroidSet, data: PointSet) -> int:
    """Number of points whose cluster's class equals their own label."""
    assign = assign_points(model, data.points)
    return int((model.class_of_cluster[assign] == data.labels).sum())


def class_mean_centroids(data: PointSet, n_classes: int | None = None) -> CentroidSet:
    if data.labels is None:
        raise LabelingError("class means require labeled points")
    C = n_classes if n_classes is not None else int(data.labels.max()) + 1
    if data.labels.max() >= C:
        raise LabelingError(f"label {data.labels.max()} out of range for {C} classes")
    counts = np.bincount(data.labels, minlength=C)
    if (counts == 0).any():
        raise LabelingError(f"classes without points: {np.flatnonzero(counts == 0).tolist()}")
    sums = np.zeros((C, data.points.shape[1]))
    np.add.at(sums, data.labels, data.points)
    centroids = sums / counts[:, None]
    inertia = float(((data.points - centroids[data.labels]) ** 2).sum())
    return CentroidSet(centroids, np.arange(C), inertia)


def save_centroids(cs: CentroidSet, path) -> None:
    doc = {
        "format_version": CENTROID_FILE_VERSION,
        "n": cs.n,
        "k": cs.k,
        "centroids": cs.centroids.tolist(),
        "class_of_cluster": cs.class_of_cluster.tolist(),
        "inertia": cs.inertia,
    }
    Path(path).write_text(json.dumps(doc, indent=1) + "\n")


def load_centroids(path) -> CentroidSet:
    try:
        doc = json.loads(Path(path).read_text())
        if doc.get("format_version") != CENTROID_FILE_VERSION:
            raise ParseError(f"{path}: unsupported centroid file version {doc.get('format_version')!r}")
        cs = CentroidSet(doc["centroids"], doc["class_of_cluster"], float(doc["inertia"]))
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise ParseError(f"{path}: malformed centroid file ({exc})") from exc
    except LabelingError as exc:
        raise ParseError(f"{path}: {exc}") from exc
    if cs.n != doc["n"] or cs.k != doc["k"]:
        raise ParseError(f"{path}: declared shape ({doc['k']}, {doc['n']}) does not match centroids {cs.centroids.shape}")
    return cs
