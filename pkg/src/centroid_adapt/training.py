"""Two-stage training: a donor network on the target domain, then the
adapted network on the source domain under the centroid-matching loss."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import clustering, losses
from .clustering import CentroidSet, PointSet
from .data import DatasetSplit, SequenceSample, batch_indices, stack
from .errors import ConfigError, NumericalError, ShapeError
from .losses import LossConfig
from .nn import DEFAULT_INIT_STD, ArchSpec, NetworkState, backward, forward, init_network

log = logging.getLogger(__name__)

OPTIMIZERS = ("sgd", "sgd-momentum", "adam")
CENTROID_METHODS = ("kmeans", "class-mean")
METRIC_COLUMNS = ("epoch", "E_a", "E_b", "E_tot", "source_acc", "target_acc")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 60
    batch_size: int = 32
    learning_rate: float = 0.001
    optimizer: str = "sgd"
    momentum: float = 0.9
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)
    representation_dim: int = 16
    encoder: tuple[int, ...] = (16,)
    gru_layers: int = 2
    dropout_rate: float = 0.0
    clip_norm: float | None = 5.0
    init_std: float = DEFAULT_INIT_STD
    bias_init: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "encoder", tuple(int(w) for w in self.encoder))
        if isinstance(self.loss, dict):
            object.__setattr__(self, "loss", LossConfig(**self.loss))
        if int(self.epochs) < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if int(self.batch_size) < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not (self.learning_rate > 0):
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if not (0.0 <= self.dropout_rate < 1.0):
            raise ConfigError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")
        if self.representation_dim < 1 or self.gru_layers < 0:
            raise ConfigError("representation_dim must be >= 1 and gru_layers >= 0")
        if self.clip_norm is not None and not (self.clip_norm > 0):
            raise ConfigError("clip_norm must be positive or null")

    def arch(self, input_dim: int, n_classes: int) -> ArchSpec:
        gru = (self.representation_dim,) * self.gru_layers
        encoder = self.encoder
        if not gru:
            # the last encoder layer then carries the representation
            encoder = (*encoder[:-1], self.representation_dim) if encoder else (self.representation_dim,)
        return ArchSpec(input_dim, encoder, gru, n_classes)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder"] = list(self.encoder)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown training config fields: {sorted(unknown)}")
        if "loss" in d:
            loss = dict(d["loss"])
            if "lambda" in loss:
                loss["lam"] = loss.pop("lambda")
            try:
                d["loss"] = LossConfig(**loss)
            except TypeError as exc:
                raise ConfigError(f"bad loss config: {exc}") from exc
        return cls(**d)


@dataclass
class RunRecord:
    config: dict
    E_a: list[float] = field(default_factory=list)
    E_b: list[float] = field(default_factory=list)
    E_tot: list[float] = field(default_factory=list)
    source_acc: list[float] = field(default_factory=list)
    target_acc: list[float] = field(default_factory=list)
    best_epoch: int = -1
    wall_clock: float = 0.0

    def write_metrics(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(METRIC_COLUMNS)
            for e in range(len(self.E_tot)):
                w.writerow([e + 1, *(_fmt(s[e]) for s in (self.E_a, self.E_b, self.E_tot, self.source_acc, self.target_acc))])


def _fmt(v) -> str:
    return "" if v is None or (isinstance(v, float) and np.isnan(v)) else repr(float(v))


class Optimizer:
    def __init__(self, cfg: TrainConfig):
        self.kind = cfg.optimizer
        self.lr = cfg.learning_rate
        self.momentum = cfg.momentum
        self.state: dict[str, tuple] = {}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        for name, g in grads.items():
            p = params[name]
            if self.kind == "sgd":
                p -= self.lr * g
            elif self.kind == "sgd-momentum":
                v = self.state.get(name, (np.zeros_like(p),))[0]
                v = self.momentum * v + g
                self.state[name] = (v,)
                p -= self.lr * v
            else:
                m, v = self.state.get(name, (np.zeros_like(p), np.zeros_like(p)))
                m = 0.9 * m + 0.1 * g
                v = 0.999 * v + 0.001 * g * g
                self.state[name] = (m, v)
                m_hat = m / (1 - 0.9**self.t)
                v_hat = v / (1 - 0.999**self.t)
                p -= self.lr * m_hat / (np.sqrt(v_hat) + 1e-8)


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float | None) -> float:
    norm = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
    if max_norm is not None and norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


def mse_terms(O: np.ndarray, d: np.ndarray):
    """``(E_a, dE_a/dO)`` for a batch, the plain training criterion."""
    return losses.loss_ea(O, d), losses.ea_grad(O, d)


def accuracy(net: NetworkState, frames: np.ndarray, labels: np.ndarray, Z: CentroidSet | None, cfg: LossConfig) -> float:
    tr = forward(net, frames)
    if Z is None:
        pred = np.argmax(tr.O, axis=1)
    else:
        pred = losses.predict(tr.O, tr.X, Z, cfg)
    return float((pred == labels).mean())


def _train(
    net: NetworkState,
    train: list[SequenceSample],
    cfg: TrainConfig,
    Z: CentroidSet | None,
    source_eval: list[SequenceSample] | None,
    target_eval: list[SequenceSample] | None,
    select_on: str | None,
) -> tuple[NetworkState, RunRecord]:
    start = time.perf_counter()
    frames, labels = stack(train)
    C = net.arch.n_classes
    d_all = losses.one_hot(labels, C)
    evals = {}
    for key, samples in (("source", source_eval), ("target", target_eval)):
        if samples:
            evals[key] = stack(samples)
    lcfg = cfg.loss if Z is not None else replace(cfg.loss, lam=1.0, predictor="output")
    opt = Optimizer(cfg)
    drop_rng = np.random.default_rng([cfg.seed, 0xD0])
    record = RunRecord(config=cfg.to_dict())
    best = (-1.0, None)

    for epoch in range(cfg.epochs):
        sums = np.zeros(3)
        for idx in batch_indices(len(train), cfg.batch_size, cfg.seed, epoch):
            tr = forward(net, frames[idx], cfg.dropout_rate, drop_rng if cfg.dropout_rate > 0 else None)
            d = d_all[idx]
            if Z is None:
                ea, gO = mse_terms(tr.O, d)
                eb, tot, gX = np.nan, ea, np.zeros_like(tr.X)
            else:
                tot, ea, eb, gO, gX = losses.combined_loss(tr.O, tr.X, Z, d, lcfg)
            if not np.isfinite(tot):
                raise NumericalError(
                    f"non-finite loss at epoch {epoch + 1}; last finite epoch losses "
                    f"E_a={record.E_a[-1:]}, E_b={record.E_b[-1:]}, E_tot={record.E_tot[-1:]}"
                )
            grads = backward(net, tr, gO, gX)
            clip_gradients(grads, cfg.clip_norm)
            opt.step(net.params, grads)
            sums += len(idx) * np.array([ea, eb, tot])
        ea, eb, tot = sums / len(train)
        record.E_a.append(float(ea))
        record.E_b.append(float(eb))
        record.E_tot.append(float(tot))
        if not all(np.isfinite(p).all() for p in net.params.values()):
            raise NumericalError(f"non-finite parameters after epoch {epoch + 1}")
        for key in ("source", "target"):
            acc = accuracy(net, *evals[key], Z, lcfg) if key in evals else np.nan
            getattr(record, f"{key}_acc").append(acc)
        if select_on is not None:
            acc = getattr(record, f"{select_on}_acc")[-1]
            if acc > best[0]:
                best = (acc, net.copy())
                record.best_epoch = epoch + 1
        log.debug("epoch %d E_a=%.5f E_b=%.5f E_tot=%.5f", epoch + 1, ea, eb, tot)

    record.wall_clock = time.perf_counter() - start
    if select_on is not None and best[1] is not None:
        return best[1], record
    record.best_epoch = cfg.epochs
    return net, record


def _new_net(samples: list[SequenceSample], cfg: TrainConfig, n_classes: int) -> NetworkState:
    D = samples[0].frames.shape[1]
    return init_network(cfg.arch(D, n_classes), cfg.seed, cfg.init_std, cfg.bias_init)


def train_netb(data: DatasetSplit, cfg: TrainConfig, n_classes: int) -> tuple[NetworkState, RunRecord]:
    """Plain MSE training on the target domain; keeps the checkpoint with the
    best accuracy on ``data.eval``."""
    net = _new_net(data.train, cfg, n_classes)
    return _train(net, data.train, cfg, None, None, data.eval, select_on="target")


def train_plain(data: DatasetSplit, cfg: TrainConfig, n_classes: int, target_eval=None) -> tuple[NetworkState, RunRecord]:
    """Plain MSE training for a fixed budget, no model selection."""
    net = _new_net(data.train, cfg, n_classes)
    return _train(net, data.train, cfg, None, data.eval, target_eval, select_on=None)


def train_neta(
    data: DatasetSplit,
    Z: CentroidSet,
    cfg: TrainConfig,
    target_eval: list[SequenceSample] | None = None,
) -> tuple[NetworkState, RunRecord]:
    """Combined-loss training on the source domain for a fixed epoch budget."""
    if Z.n != cfg.representation_dim:
        raise ShapeError(f"centroid width {Z.n} does not match representation_dim {cfg.representation_dim}")
    net = _new_net(data.train, cfg, Z.k)
    return _train(net, data.train, cfg, Z, data.eval, target_eval, select_on=None)


def extract_representations(net: NetworkState, samples: list[SequenceSample], chunk: int = 512) -> PointSet:
    frames, labels = stack(samples)
    if frames.shape[2] != net.arch.input_dim:
        raise ShapeError(f"data width {frames.shape[2]} does not match network input width {net.arch.input_dim}")
    rows = [forward(net, frames[i : i + chunk]).X for i in range(0, len(frames), chunk)]
    return PointSet(np.concatenate(rows), labels)


def centroids_from_points(points: PointSet, method: str, seed: int, n_classes: int) -> CentroidSet:
    if method == "kmeans":
        model = clustering.kmeans_fit(points, n_classes, seed=seed)
        return clustering.label_clusters(model, points)
    if method == "class-mean":
        return clustering.class_mean_centroids(points, n_classes)
    raise ConfigError(f"method must be one of {CENTROID_METHODS}, got {method!r}")


def build_centroids(
    net: NetworkState,
    samples: list[SequenceSample],
    method: str = "kmeans",
    seed: int = 0,
    k: int | None = None,
    path=None,
) -> CentroidSet:
    """Representations -> clusters (one per class) -> class labels."""
    C = net.arch.n_classes
    if k is not None and k != C:
        raise ConfigError(f"cluster count must equal the class count ({C}), got k={k}")
    points = extract_representations(net, samples)
    cs = centroids_from_points(points, method, seed, C)
    if path is not None:
        clustering.save_centroids(cs, path)
    return cs


SWEEP_COLUMNS = ("lambda", "normalization", "predictor", "seed", "source_acc", "target_acc")


def lambda_sweep(
    data: DatasetSplit,
    Z: CentroidSet,
    cfg: TrainConfig,
    lambdas=(0.0, 0.25, 0.5, 0.75, 1.0),
    target_eval: list[SequenceSample] | None = None,
    normalizations=("softmax", "linear"),
    seeds=None,
) -> list[dict]:
    """One training run per (normalization, lambda, seed); each run is scored
    with both predictors."""
    for lam in lambdas:
        if not 0.0 <= lam <= 1.0:
            raise ConfigError(f"lambda {lam} outside [0, 1]")
    seeds = [cfg.seed] if seeds is None else list(seeds)
    src = stack(data.eval)
    tgt = stack(target_eval) if target_eval else None
    rows = []
    for norm in normalizations:
        for lam in lambdas:
            for seed in seeds:
                run_cfg = replace(cfg, seed=seed, loss=replace(cfg.loss, lam=float(lam), normalization=norm))
                net, _ = train_neta(data, Z, run_cfg)
                for predictor in ("output", "centroid"):
                    pcfg = replace(run_cfg.loss, predictor=predictor)
                    rows.append(
                        {
                            "lambda": float(lam),
                            "normalization": norm,
                            "predictor": predictor,
                            "seed": seed,
                            "source_acc": accuracy(net, *src, Z, pcfg),
                            "target_acc": accuracy(net, *tgt, Z, pcfg) if tgt else float("nan"),
                        }
                    )
    return rows


def summarize_sweep(rows: list[dict]) -> list[dict]:
    """Mean and (population) standard deviation over seeds, in input order."""
    groups: dict[tuple, list[dict]] = {}
    for r in rows:
        groups.setdefault((r["lambda"], r["normalization"], r["predictor"]), []).append(r)
    out = []
    for (lam, norm, pred), rs in groups.items():
        src = np.array([r["source_acc"] for r in rs])
        tgt = np.array([r["target_acc"] for r in rs])
        out.append(
            {
                "lambda": lam,
                "normalization": norm,
                "predictor": pred,
                "n_seeds": len(rs),
                "source_mean": float(src.mean()),
                "source_std": float(src.std()),
                "target_mean": float(tgt.mean()),
                "target_std": float(tgt.std()),
            }
        )
    return out


def write_rows(rows: list[dict], path, columns=None) -> None:
    columns = list(columns or (rows[0].keys() if rows else SWEEP_COLUMNS))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r[c]) if isinstance(r[c], float) else r[c] for c in columns])
