"""Synthetic two-domain sequence data and its JSON Lines storage.

Each class has a mean vector; the source domain draws sequences around those
means, the target domain moves every mean by a fixed rotation and
translation and additionally mislabels a fraction of its samples.  This
gives a controllable covariate shift plus annotation disagreement between
the two domains.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import ConfigError, ParseError

DOMAINS = ("source", "target")


@dataclass
class SequenceSample:
    frames: np.ndarray  # (T, D)
    label: int
    domain: str = "source"

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2:
            raise ConfigError(f"frames must be a (T, D) matrix, got shape {self.frames.shape}")
        self.label = int(self.label)
        if self.domain not in DOMAINS:
            raise ConfigError(f"domain must be one of {DOMAINS}, got {self.domain!r}")

    def to_json(self) -> str:
        return json.dumps({"frames": self.frames.tolist(), "label": self.label, "domain": self.domain})


@dataclass
class DatasetSplit:
    train: list[SequenceSample]
    eval: list[SequenceSample]

    def __post_init__(self):
        if not self.train or not self.eval:
            raise ConfigError("both train and eval must be non-empty")


@dataclass(frozen=True)
class SyntheticSpec:
    seed: int
    n_classes: int = 7
    feature_dim: int = 12
    sequence_length: int = 8
    train_per_class: int = 60
    eval_per_class: int = 30
    class_mean_separation: float = 1.0
    within_class_std: float = 0.15
    temporal_jitter_std: float = 0.25
    rotation_angle: float = 0.8
    translation_magnitude: float = 0.3
    label_noise_rate: float = 0.1

    def __post_init__(self):
        for name in ("n_classes", "feature_dim", "sequence_length", "train_per_class", "eval_per_class"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.n_classes < 2:
            raise ConfigError("n_classes must be >= 2")
        for name in ("class_mean_separation", "within_class_std", "temporal_jitter_std", "translation_magnitude"):
            v = getattr(self, name)
            if not (v >= 0 and np.isfinite(v)):
                raise ConfigError(f"{name} must be a finite value >= 0, got {v}")
        if not np.isfinite(self.rotation_angle):
            raise ConfigError("rotation_angle must be finite")
        if not (0.0 <= self.label_noise_rate < 1.0):
            raise ConfigError(f"label_noise_rate must lie in [0, 1), got {self.label_noise_rate}")
        if self.feature_dim < 2 and self.rotation_angle != 0:
            raise ConfigError("a nonzero rotation needs feature_dim >= 2")
        if self.feature_dim < self.n_classes - 1:
            raise ConfigError(f"feature_dim must be >= n_classes - 1 to hold the class simplex ({self.n_classes - 1})")

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown spec fields: {sorted(unknown)}")
        if "seed" not in d:
            raise ConfigError("missing required field: seed")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def simplex_means(n_classes: int, dim: int, separation: float, rng: np.random.Generator) -> np.ndarray:
    """Regular simplex vertices centred at the origin, pairwise ``separation`` apart,
    randomly oriented in ``dim`` dimensions."""
    E = np.eye(n_classes) - 1.0 / n_classes
    # orthonormal basis of the (C-1)-dim hyperplane that contains the vertices
    U, _, _ = np.linalg.svd(E)
    coords = E @ U[:, : n_classes - 1]
    coords *= separation / np.sqrt(2.0)
    Q, R = np.linalg.qr(rng.standard_normal((dim, dim)))
    Q *= np.sign(np.diag(R))
    padded = np.zeros((n_classes, dim))
    padded[:, : n_classes - 1] = coords
    return padded @ Q.T


def plane_rotation(dim: int, angle: float) -> np.ndarray:
    """Rotation by ``angle`` in each coordinate plane (0,1), (2,3), ..."""
    R = np.eye(dim)
    c, s = np.cos(angle), np.sin(angle)
    for a in range(0, dim - 1, 2):
        R[a, a], R[a, a + 1] = c, -s
        R[a + 1, a], R[a + 1, a + 1] = s, c
    return R


def _draw(means: np.ndarray, per_class: int, spec: SyntheticSpec, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    C, D = means.shape
    T = spec.sequence_length
    labels = np.repeat(np.arange(C), per_class)
    offsets = rng.standard_normal((len(labels), 1, D)) * spec.within_class_std
    jitter = rng.standard_normal((len(labels), T, D)) * spec.temporal_jitter_std
    frames = means[labels][:, None, :] + offsets + jitter
    return np.clip(frames, -1.0, 1.0), labels


def _flip(labels: np.ndarray, rate: float, C: int, rng: np.random.Generator) -> np.ndarray:
    flip = rng.random(len(labels)) < rate
    # shift by 1..C-1 so a flipped label always lands on another class
    shift = rng.integers(1, C, size=len(labels))
    return np.where(flip, (labels + shift) % C, labels)


def domain_means(spec: SyntheticSpec) -> tuple[np.ndarray, np.ndarray]:
    geo = np.random.default_rng(np.random.SeedSequence(spec.seed).spawn(4)[0])
    src = simplex_means(spec.n_classes, spec.feature_dim, spec.class_mean_separation, geo)
    direction = geo.standard_normal(spec.feature_dim)
    direction /= np.linalg.norm(direction)
    tgt = src @ plane_rotation(spec.feature_dim, spec.rotation_angle).T + spec.translation_magnitude * direction
    return src, tgt


def generate(spec: SyntheticSpec) -> tuple[DatasetSplit, DatasetSplit]:
    """Source and target splits; a pure function of ``spec``."""
    _, s_src, s_tgt, s_noise = np.random.SeedSequence(spec.seed).spawn(4)
    src_means, tgt_means = domain_means(spec)
    out = []
    for domain, means, ss in (("source", src_means, s_src), ("target", tgt_means, s_tgt)):
        rng = np.random.default_rng(ss)
        parts = []
        for per_class in (spec.train_per_class, spec.eval_per_class):
            frames, labels = _draw(means, per_class, spec, rng)
            parts.append((frames, labels))
        if domain == "target" and spec.label_noise_rate > 0:
            noise = np.random.default_rng(s_noise)
            parts = [(f, _flip(y, spec.label_noise_rate, spec.n_classes, noise)) for f, y in parts]
        train, ev = (
            [SequenceSample(f, int(y), domain) for f, y in zip(frames, labels)] for frames, labels in parts
        )
        out.append(DatasetSplit(train, ev))
    return out[0], out[1]


def stack(samples: list[SequenceSample]) -> tuple[np.ndarray, np.ndarray]:
    """``(frames (M, T, D), labels (M,))`` for equal-length samples."""
    if not samples:
        raise ConfigError("no samples to stack")
    shapes = {s.frames.shape for s in samples}
    if len(shapes) != 1:
        raise ConfigError(f"samples have differing frame shapes {sorted(shapes)}")
    return np.stack([s.frames for s in samples]), np.array([s.label for s in samples], dtype=int)


def save_samples(samples: list[SequenceSample], path) -> None:
    if not samples:
        raise ConfigError("refusing to save an empty sample list")
    with open(path, "w") as fh:
        for s in samples:
            fh.write(s.to_json() + "\n")


def load_samples(path) -> list[SequenceSample]:
    samples = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                samples.append(SequenceSample(rec["frames"], rec["label"], rec["domain"]))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ParseError(f"{path}: record {lineno} is malformed ({exc})") from exc
    if not samples:
        raise ParseError(f"{path}: no records")
    return samples


def save_dataset(split: DatasetSplit, directory, name: str) -> tuple[Path, Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = directory / f"{name}_train.jsonl", directory / f"{name}_eval.jsonl"
    save_samples(split.train, paths[0])
    save_samples(split.eval, paths[1])
    return paths


def load_dataset(directory, name: str) -> DatasetSplit:
    directory = Path(directory)
    return DatasetSplit(load_samples(directory / f"{name}_train.jsonl"), load_samples(directory / f"{name}_eval.jsonl"))


def batch_indices(n: int, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    perm = np.random.default_rng([seed, epoch]).permutation(n)
    return [perm[i : i + batch_size] for i in range(0, n, batch_size)]


def batch_iter(samples: list[SequenceSample], batch_size: int, seed: int, epoch: int) -> Iterator[list[SequenceSample]]:
    """Shuffled batches; the order depends only on ``(seed, epoch)``."""
    for idx in batch_indices(len(samples), batch_size, seed, epoch):
        yield [samples[i] for i in idx]
