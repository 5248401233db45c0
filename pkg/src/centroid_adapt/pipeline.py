"""End-to-end experiment: donor network, centroids, adapted networks at
several lambdas, and their accuracy / centroid-distance comparison."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .clustering import CentroidSet
from .data import SyntheticSpec, generate
from .evaluation import centroid_distance_report, evaluate
from .losses import LossConfig
from .nn import NetworkState
from .training import TrainConfig, build_centroids, train_netb, train_neta


@dataclass
class LambdaResult:
    lam: float
    source_acc: float
    target_acc: float
    distances: np.ndarray
    net: NetworkState = field(repr=False)


@dataclass
class PipelineResult:
    seed: int
    netb_target_acc: float
    centroids: CentroidSet
    runs: dict[float, LambdaResult]


def run_pipeline(
    spec: SyntheticSpec,
    netb_cfg: TrainConfig,
    neta_cfg: TrainConfig,
    lambdas=(0.0, 1.0),
    method: str = "kmeans",
) -> PipelineResult:
    """Generate data, train the donor on the target domain, cluster its
    representations, then train one adapted network per lambda.

    Accuracies use the ``auto`` predictor of each run's loss config.
    """
    source, target = generate(spec)
    netb, _ = train_netb(target, netb_cfg, spec.n_classes)
    Z = build_centroids(netb, target.train, method, seed=netb_cfg.seed)
    netb_acc = evaluate(netb, None, target.eval, LossConfig(lam=1.0, predictor="output")).accuracy
    runs = {}
    for lam in lambdas:
        cfg = replace(neta_cfg, loss=replace(neta_cfg.loss, lam=float(lam)))
        net, _ = train_neta(source, Z, cfg)
        src = evaluate(net, Z, source.eval, cfg.loss).accuracy
        tgt = evaluate(net, Z, target.eval, cfg.loss).accuracy
        report = centroid_distance_report(net, Z, source.train, method, seed=neta_cfg.seed, label=f"lambda={lam:g}")
        runs[float(lam)] = LambdaResult(float(lam), src, tgt, report.distances, net)
    return PipelineResult(spec.seed, netb_acc, Z, runs)
