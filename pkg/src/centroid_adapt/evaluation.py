"""Accuracy tables, confusion matrices, centroid-distance reports and PCA export."""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import losses
from .clustering import CentroidSet, PointSet
from .data import SequenceSample, stack
from .errors import EvaluationError, ShapeError
from .losses import LossConfig
from .nn import NetworkState, forward
from .training import centroids_from_points, extract_representations

EMOTION_NAMES = ("Neutral", "Anger", "Disgust", "Fear", "Happy", "Sad", "Surprise")


def class_names(n_classes: int) -> list[str]:
    if n_classes == len(EMOTION_NAMES):
        return list(EMOTION_NAMES)
    return [f"class_{i}" for i in range(n_classes)]


@dataclass
class ConfusionMatrix:
    """Rows are true classes, columns predicted classes."""

    counts: np.ndarray

    @classmethod
    def from_predictions(cls, labels, predictions, n_classes: int) -> "ConfusionMatrix":
        counts = np.zeros((n_classes, n_classes), dtype=int)
        np.add.at(counts, (np.asarray(labels, dtype=int), np.asarray(predictions, dtype=int)), 1)
        return cls(counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def support(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    @property
    def normalized(self) -> np.ndarray:
        """Row-normalized matrix; rows without support are NaN."""
        sup = self.support[:, None].astype(float)
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(sup > 0, self.counts / np.where(sup > 0, sup, 1.0), np.nan)

    @property
    def accuracy(self) -> float:
        return float(np.trace(self.counts) / self.total)

    @property
    def per_class_accuracy(self) -> np.ndarray:
        return np.diag(self.normalized).copy()


@dataclass
class EvalResult:
    accuracy: float
    per_class: np.ndarray
    confusion: ConfusionMatrix
    predictor: str


def predict_samples(net: NetworkState, Z: CentroidSet | None, samples: list[SequenceSample], cfg: LossConfig) -> tuple[np.ndarray, np.ndarray]:
    frames, labels = stack(samples)
    tr = forward(net, frames)
    if cfg.resolved_predictor() == "output" or Z is None:
        pred = np.argmax(tr.O, axis=1)
    else:
        pred = losses.predict(tr.O, tr.X, Z, cfg)
    return pred, labels


def evaluate(net: NetworkState, Z: CentroidSet | None, samples: list[SequenceSample], cfg: LossConfig) -> EvalResult:
    if not samples:
        raise EvaluationError("cannot evaluate on an empty sample list")
    pred, labels = predict_samples(net, Z, samples, cfg)
    cm = ConfusionMatrix.from_predictions(labels, pred, net.arch.n_classes)
    return EvalResult(cm.accuracy, cm.per_class_accuracy, cm, cfg.resolved_predictor())


def majority_vote(predictions, n_classes: int) -> int:
    """Most frequent class; ties go to the lowest class id."""
    return int(np.argmax(np.bincount(np.asarray(predictions, dtype=int), minlength=n_classes)))


def aggregate_windows(
    net: NetworkState,
    Z: CentroidSet | None,
    frames: np.ndarray,
    window: int,
    cfg: LossConfig,
    stride: int = 1,
) -> int:
    """Classify every sliding window of a long sequence and take the majority."""
    frames = np.asarray(frames, dtype=np.float64)
    if window < 1 or window > len(frames):
        raise ShapeError(f"window {window} does not fit a sequence of {len(frames)} frames")
    starts = range(0, len(frames) - window + 1, stride)
    windows = np.stack([frames[s : s + window] for s in starts])
    tr = forward(net, windows)
    if cfg.resolved_predictor() == "output" or Z is None:
        preds = np.argmax(tr.O, axis=1)
    else:
        preds = losses.predict(tr.O, tr.X, Z, cfg)
    return majority_vote(preds, net.arch.n_classes)


def _num(v: float) -> str:
    return "" if np.isnan(v) else f"{v:.6g}"


def write_per_class_csv(path, rows: list[tuple[str, float, np.ndarray, float]], names: list[str], append: bool = False) -> None:
    """Rows of ``(set, lambda, per_class_accuracies, total)``.

    Columns: ``set, lambda, <class names...>, Total``.
    """
    header = ["set", "lambda", *names, "Total"]
    mode = "a" if append else "w"
    write_header = True
    if append:
        try:
            with open(path, newline="") as fh:
                existing = next(csv.reader(fh), None)
            if existing is not None:
                if existing != header:
                    raise EvaluationError(f"{path}: existing header {existing} differs from {header}")
                write_header = False
        except FileNotFoundError:
            pass
    with open(path, mode, newline="") as fh:
        w = csv.writer(fh)
        if write_header:
            w.writerow(header)
        for set_name, lam, per_class, total in rows:
            w.writerow([set_name, _num(lam), *(_num(v) for v in per_class), _num(total)])


def write_confusion_csv(path, matrix: np.ndarray, names: list[str]) -> None:
    """Square matrix with a leading column of true-class names."""
    matrix = np.asarray(matrix)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["", *names])
        for name, row in zip(names, matrix):
            if np.issubdtype(matrix.dtype, np.integer):
                w.writerow([name, *row.tolist()])
            else:
                w.writerow([name, *(_num(v) for v in row)])


def read_table_csv(path) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


@dataclass
class DistanceReport:
    """Per-class distance between a network's class centroids and Z."""

    label: str
    distances: np.ndarray
    names: list[str] = field(default_factory=list)


def centroid_distances(A: CentroidSet, Z: CentroidSet, normalize: bool = False) -> np.ndarray:
    a, z = A.by_class(), Z.by_class()
    if a.shape != z.shape:
        raise ShapeError(f"centroid sets differ in shape: {a.shape} vs {z.shape}")
    if normalize:
        a = a / np.maximum(np.linalg.norm(a, axis=1, keepdims=True), 1e-12)
        z = z / np.maximum(np.linalg.norm(z, axis=1, keepdims=True), 1e-12)
    return np.linalg.norm(a - z, axis=1)


def centroid_distance_report(
    net: NetworkState,
    Z: CentroidSet,
    samples: list[SequenceSample],
    method: str = "kmeans",
    seed: int = 0,
    label: str = "",
    normalize: bool = False,
) -> DistanceReport:
    """Cluster the network's representations of ``samples`` the same way the
    reference centroids were built, then measure class-wise distances to Z."""
    points = extract_representations(net, samples)
    if normalize:
        points = PointSet(points.points / np.maximum(np.linalg.norm(points.points, axis=1, keepdims=True), 1e-12), points.labels)
    A = centroids_from_points(points, method, seed, Z.k)
    d = centroid_distances(A, Z, normalize=normalize)
    return DistanceReport(label, d, class_names(Z.k))


def write_distance_csv(path, reports: list[DistanceReport]) -> None:
    names = reports[0].names
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["class", *(r.label for r in reports)])
        for i, name in enumerate(names):
            w.writerow([name, *(f"{r.distances[i]:.6g}" for r in reports)])


@dataclass
class Projection:
    points: np.ndarray
    centroids: np.ndarray
    components: np.ndarray  # (dims, n)
    mean: np.ndarray
    explained_variance_ratio: np.ndarray


def pca_projection(points: PointSet | np.ndarray, Z: CentroidSet | np.ndarray | None = None, dims: int = 3) -> Projection:
    """Project points (and centroids, with the same basis) onto the top
    principal components of the points."""
    X = points.points if isinstance(points, PointSet) else np.atleast_2d(np.asarray(points, dtype=np.float64))
    n = X.shape[1]
    if dims not in (2, 3):
        raise ShapeError(f"dims must be 2 or 3, got {dims}")
    if n < dims:
        raise ShapeError(f"representation width {n} is smaller than dims={dims}")
    mean = X.mean(axis=0)
    Xc = X - mean
    _, S, Vt = np.linalg.svd(Xc, full_matrices=False)
    tol = S.max(initial=0.0) * max(X.shape) * np.finfo(float).eps
    rank = int((S > tol).sum())
    comps = np.zeros((dims, n))
    k = min(rank, dims, len(Vt))
    comps[:k] = Vt[:k]
    if rank < dims:
        warnings.warn(f"point set has rank {rank} < {dims}; padding with zero coordinates", RuntimeWarning, stacklevel=2)
    var = S**2
    ratio = np.zeros(dims)
    if var.sum() > 0:
        ratio[:k] = var[:k] / var.sum()
    if Z is None:
        zc = np.zeros((0, n))
    else:
        zc = Z.by_class() if isinstance(Z, CentroidSet) else np.atleast_2d(np.asarray(Z, dtype=np.float64))
    return Projection(Xc @ comps.T, (zc - mean) @ comps.T, comps, mean, ratio)


def write_projection_csv(path, proj: Projection, labels=None) -> None:
    dims = proj.components.shape[0]
    labels = [""] * len(proj.points) if labels is None else labels
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["kind", "class", *(f"c{i + 1}" for i in range(dims))])
        for lab, row in zip(labels, proj.points):
            w.writerow(["point", lab, *(repr(float(v)) for v in row)])
        for i, row in enumerate(proj.centroids):
            w.writerow(["centroid", i, *(repr(float(v)) for v in row)])
