"""Centroid-matching losses and their gradients.

Two criteria are mixed by a weight ``lam`` in [0, 1]:

* ``E_a``: mean squared error between the network outputs and one-hot
  targets, averaged over the C outputs and over samples;
* ``E_b``: for each class i the squared distance ``V_i = |Z_i - x|^2`` of the
  representation to that class's centroid is normalized (softmax or
  division by the sum), subtracted from one, and compared by mean squared
  error against the same one-hot targets.

``E_tot = lam * E_a + (1 - lam) * E_b``.  At the endpoints the inactive term
is skipped entirely, so ``E_tot`` equals the active term bit-for-bit.

All functions accept a single sample (1-D arrays) or a batch (2-D arrays,
one row per sample); batch losses are means over rows and the returned
gradients are those of the mean.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .clustering import CentroidSet
from .errors import ConfigError, ShapeError

NORMALIZATIONS = ("softmax", "linear")
PREDICTORS = ("output", "centroid", "auto")


@dataclass(frozen=True)
class LossConfig:
    lam: float = 0.0
    normalization: str = "softmax"
    temperature: float = 1.0
    predictor: str = "auto"

    def __post_init__(self):
        if not (0.0 <= self.lam <= 1.0):
            raise ConfigError(f"lambda must lie in [0, 1], got {self.lam}")
        if self.normalization not in NORMALIZATIONS:
            raise ConfigError(f"normalization must be one of {NORMALIZATIONS}, got {self.normalization!r}")
        if not (self.temperature > 0 and np.isfinite(self.temperature)):
            raise ConfigError(f"temperature must be positive, got {self.temperature}")
        if self.predictor not in PREDICTORS:
            raise ConfigError(f"predictor must be one of {PREDICTORS}, got {self.predictor!r}")

    def resolved_predictor(self) -> str:
        if self.predictor == "auto":
            return "centroid" if self.lam < 1.0 else "output"
        return self.predictor


class LossBreakdown(NamedTuple):
    total: float
    ea: float
    eb: float
    grad_O: np.ndarray
    grad_X: np.ndarray


def one_hot(labels, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=int)
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ShapeError(f"labels must lie in [0, {n_classes}), got range [{labels.min()}, {labels.max()}]")
    out = np.zeros(labels.shape + (n_classes,))
    np.put_along_axis(out, labels[..., None], 1.0, axis=-1)
    return out


def _float(a) -> np.ndarray:
    a = np.asarray(a)
    return a.astype(np.result_type(a.dtype, np.float64), copy=False)


def _centroid_matrix(Z) -> np.ndarray:
    if isinstance(Z, CentroidSet):
        return Z.by_class()
    return _float(Z)


def distances(Z, x) -> np.ndarray:
    """Squared Euclidean distance from ``x`` to each class centroid.

    ``Z`` is a :class:`CentroidSet` (rows re-ordered by class id) or a raw
    ``(C, n)`` matrix already in class order.
    """
    Zm = _centroid_matrix(Z)
    x = _float(x)
    if x.shape[-1] != Zm.shape[1]:
        raise ShapeError(f"representation width {x.shape[-1]} does not match centroid width {Zm.shape[1]}")
    diff = Zm - x[..., None, :]
    return np.einsum("...ij,...ij->...i", diff, diff)


def _normalize(V: np.ndarray, normalization: str, temperature: float) -> np.ndarray:
    if np.isnan(V).any():
        raise ValueError("distance vector contains NaN")
    if normalization == "softmax":
        u = V / temperature
        e = np.exp(u - u.max(axis=-1, keepdims=True))
        return e / e.sum(axis=-1, keepdims=True)
    total = V.sum(axis=-1, keepdims=True)
    C = V.shape[-1]
    safe = np.where(total > 0, total, 1.0)
    return np.where(total > 0, V / safe, 1.0 / C)


def normalize(V, cfg: LossConfig) -> np.ndarray:
    """``f(V)`` along the last axis; each row sums to one."""
    return _normalize(_float(V), cfg.normalization, cfg.temperature)


def normalize_scores(V, cfg: LossConfig) -> np.ndarray:
    """``1 - f(V)``: large where the distance is small."""
    return 1.0 - normalize(V, cfg)


def _check_pair(a: np.ndarray, d: np.ndarray) -> None:
    if a.shape != d.shape:
        raise ShapeError(f"shape {a.shape} does not match desired output shape {d.shape}")


def loss_ea(O, d) -> float:
    O, d = _float(O), _float(d)
    _check_pair(O, d)
    per_sample = ((d - O) ** 2).mean(axis=-1)
    return per_sample.mean()


def ea_grad(O: np.ndarray, d: np.ndarray) -> np.ndarray:
    """Gradient of the batch-mean ``E_a`` with respect to ``O``."""
    M = O.shape[0] if O.ndim == 2 else 1
    return 2.0 * (O - d) / (O.shape[-1] * M)


def _eb_parts(x, Z, d, cfg: LossConfig):
    Zm = _centroid_matrix(Z)
    x, d = _float(x), _float(d)
    V = distances(Zm, x)
    _check_pair(V, d)
    f = _normalize(V, cfg.normalization, cfg.temperature)
    s = 1.0 - f
    return Zm, x, d, V, f, s


def loss_eb(x, Z, d, cfg: LossConfig) -> float:
    _, _, d, _, _, s = _eb_parts(x, Z, d, cfg)
    return ((d - s) ** 2).mean(axis=-1).mean()


def _eb_grad_x(Zm, x, d, V, f, s, cfg: LossConfig) -> np.ndarray:
    C = V.shape[-1]
    # dE/df_i: E = mean_i (d_i - 1 + f_i)^2
    g = 2.0 * (f - (1.0 - d)) / C
    gf = (g * f).sum(axis=-1, keepdims=True)
    if cfg.normalization == "softmax":
        gV = f * (g - gf) / cfg.temperature
    else:
        total = V.sum(axis=-1, keepdims=True)
        safe = np.where(total > 0, total, 1.0)
        # the degenerate all-zero case is non-differentiable; no gradient flows
        gV = np.where(total > 0, (g - gf) / safe, 0.0)
    # dV_i/dx = 2 (x - Z_i)
    return 2.0 * (gV.sum(axis=-1, keepdims=True) * x - gV @ Zm)


def combined_loss(O, x, Z, d, cfg: LossConfig) -> LossBreakdown:
    """Loss terms and gradients of ``E_tot`` for a sample or a batch."""
    O, x, d = _float(O), _float(x), _float(d)
    _check_pair(O, d)
    batched = O.ndim == 2
    M = O.shape[0] if batched else 1
    if batched != (x.ndim == 2) or (batched and x.shape[0] != M):
        raise ShapeError(f"outputs {O.shape} and representations {x.shape} disagree on batch size")

    ea = loss_ea(O, d)
    Zm, x, d, V, f, s = _eb_parts(x, Z, d, cfg)
    eb = ((d - s) ** 2).mean(axis=-1).mean()

    lam = cfg.lam
    if lam == 1.0:
        total = ea
    elif lam == 0.0:
        total = eb
    else:
        total = lam * ea + (1.0 - lam) * eb

    if lam == 0.0:
        grad_O = np.zeros_like(O)
    else:
        grad_O = ea_grad(O, d) if lam == 1.0 else lam * ea_grad(O, d)
    if lam == 1.0:
        grad_X = np.zeros_like(x)
    else:
        grad_X = (1.0 - lam) * _eb_grad_x(Zm, x, d, V, f, s, cfg) / M
    return LossBreakdown(total, ea, eb, grad_O, grad_X)


def loss_total(O, x, Z, d, cfg: LossConfig):
    """``(E_tot, dE_tot/dO, dE_tot/dx)``."""
    res = combined_loss(O, x, Z, d, cfg)
    return res.total, res.grad_O, res.grad_X


def predict(O, x, Z, cfg: LossConfig):
    """Class decision; ties go to the lowest class id.

    The centroid rule picks the largest score ``1 - f(V)``, which is the
    smallest distance; it is evaluated on the distances directly because
    the scores saturate to exactly 1.0 in floating point once ``f`` drops
    below machine epsilon.
    """
    mode = cfg.resolved_predictor()
    if mode == "output":
        return np.argmax(_float(O), axis=-1)
    return np.argmin(distances(Z, x), axis=-1)
