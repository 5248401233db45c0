"""Small dense + GRU network with hand-derived forward and backward passes.

The network maps a sequence of feature frames to two quantities:

* ``X``: the hidden state of the last recurrent layer at the final timestep
  (the representation that gets clustered / pulled toward centroids);
* ``O``: a linear output layer applied to ``X``.

Encoder layers are applied frame-wise, the GRU stack runs over time.  All
computation is batched over samples: frames have shape ``(B, T, D)``.

Parameters live in a flat ``dict`` keyed by dotted names so that gradients,
optimizer state and checkpoints share one layout.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .errors import ConfigError, ParseError, ShapeError

CHECKPOINT_VERSION = 1
DEFAULT_INIT_STD = float(np.sqrt(0.1))
_GRU_GATES = ("z", "r", "c")


@dataclass(frozen=True)
class ArchSpec:
    """Layer widths of a network.

    ``encoder`` are frame-wise dense widths, ``gru`` the recurrent widths.
    Either list may be empty; the representation is then the output of the
    last layer that exists (or the raw final frame).
    """

    input_dim: int
    encoder: tuple[int, ...] = (16,)
    gru: tuple[int, ...] = (16, 16)
    n_classes: int = 7
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "encoder", tuple(int(w) for w in self.encoder))
        object.__setattr__(self, "gru", tuple(int(w) for w in self.gru))
        widths = [self.input_dim, *self.encoder, *self.gru, self.n_classes]
        if any(int(w) <= 0 for w in widths):
            raise ConfigError(f"layer widths must be positive, got {widths}")
        if self.activation not in ("relu", "linear"):
            raise ConfigError(f"unknown encoder activation {self.activation!r}")

    @property
    def representation_dim(self) -> int:
        if self.gru:
            return self.gru[-1]
        if self.encoder:
            return self.encoder[-1]
        return self.input_dim

    def parameter_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes: dict[str, tuple[int, ...]] = {}
        width = self.input_dim
        for i, w in enumerate(self.encoder):
            shapes[f"enc{i}.W"] = (w, width)
            shapes[f"enc{i}.b"] = (w,)
            width = w
        for j, h in enumerate(self.gru):
            for g in _GRU_GATES:
                shapes[f"gru{j}.W{g}"] = (h, width)
                shapes[f"gru{j}.U{g}"] = (h, h)
                shapes[f"gru{j}.b{g}"] = (h,)
            width = h
        shapes["out.W"] = (self.n_classes, width)
        shapes["out.b"] = (self.n_classes,)
        return shapes

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder"] = list(self.encoder)
        d["gru"] = list(self.gru)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArchSpec":
        return cls(
            input_dim=int(d["input_dim"]),
            encoder=tuple(d.get("encoder", ())),
            gru=tuple(d.get("gru", ())),
            n_classes=int(d["n_classes"]),
            activation=d.get("activation", "relu"),
        )


@dataclass
class NetworkState:
    arch: ArchSpec
    params: dict[str, np.ndarray]
    seed: int = 0
    init_std: float = DEFAULT_INIT_STD
    bias_init: float = 1.0

    def copy(self) -> "NetworkState":
        return NetworkState(
            self.arch,
            {k: v.copy() for k, v in self.params.items()},
            self.seed,
            self.init_std,
            self.bias_init,
        )

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())


@dataclass
class GRUCache:
    inputs: np.ndarray  # (B, T, I)
    h_prev: np.ndarray  # (B, T, H) state entering each step
    z: np.ndarray
    r: np.ndarray
    c: np.ndarray
    outputs: np.ndarray  # (B, T, H)


@dataclass
class ForwardTrace:
    """Cached activations of one batched forward pass."""

    frames: np.ndarray
    enc_pre: list[np.ndarray] = field(default_factory=list)
    enc_out: list[np.ndarray] = field(default_factory=list)
    dropout_mask: np.ndarray | None = None
    gru: list[GRUCache] = field(default_factory=list)
    X: np.ndarray | None = None
    O: np.ndarray | None = None

    def __len__(self) -> int:
        return self.frames.shape[1]


def truncated_normal(rng: np.random.Generator, shape, std: float, bound: float = 2.0) -> np.ndarray:
    """Zero-mean normal samples, redrawn until they fall within ``bound * std``."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > bound
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > bound
    return out * std


def init_network(
    arch: ArchSpec,
    seed: int,
    init_std: float = DEFAULT_INIT_STD,
    bias_init: float = 1.0,
) -> NetworkState:
    """Truncated-normal weights (cut at two standard deviations), constant biases."""
    if not (init_std > 0 and np.isfinite(init_std)):
        raise ConfigError(f"init_std must be positive, got {init_std}")
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in arch.parameter_shapes().items():
        if name.rsplit(".", 1)[1].startswith("b"):
            params[name] = np.full(shape, float(bias_init))
        else:
            params[name] = truncated_normal(rng, shape, init_std)
    return NetworkState(arch, params, seed, float(init_std), float(bias_init))


def zeros_like_params(net: NetworkState) -> dict[str, np.ndarray]:
    return {k: np.zeros_like(v) for k, v in net.params.items()}


def _sigmoid(a: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    e = np.exp(a[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def _as_batch(frames) -> tuple[np.ndarray, bool]:
    x = np.asarray(frames)
    x = x.astype(np.result_type(x.dtype, np.float64), copy=False)
    if x.ndim == 2:
        return x[None], True
    if x.ndim != 3:
        raise ShapeError(f"frames must be (T, D) or (B, T, D), got shape {x.shape}")
    return x, False


def forward(
    net: NetworkState,
    frames,
    dropout_rate: float = 0.0,
    rng: np.random.Generator | None = None,
) -> ForwardTrace:
    """Run the network on ``frames`` of shape (T, D) or (B, T, D).

    Dropout (inverted) is applied to the encoder output only when
    ``dropout_rate > 0`` and an ``rng`` is supplied.  For a single (T, D)
    sequence the trace still holds batched arrays with B = 1.
    """
    x, _ = _as_batch(frames)
    arch = net.arch
    if x.shape[2] != arch.input_dim:
        raise ShapeError(f"frame width {x.shape[2]} does not match network input width {arch.input_dim}")
    if x.shape[1] < 1:
        raise ShapeError("sequence must contain at least one frame")
    p = net.params
    trace = ForwardTrace(frames=x)

    h = x
    for i in range(len(arch.encoder)):
        a = h @ p[f"enc{i}.W"].T + p[f"enc{i}.b"]
        h = np.maximum(a, 0.0) if arch.activation == "relu" else a
        trace.enc_pre.append(a)
        trace.enc_out.append(h)
    if dropout_rate > 0.0 and rng is not None and arch.encoder:
        keep = 1.0 - dropout_rate
        mask = (rng.random(h.shape) < keep) / keep
        trace.dropout_mask = mask
        h = h * mask

    B, T, _ = h.shape
    dt = np.result_type(h, p["out.W"])
    for j, H in enumerate(arch.gru):
        Wz, Uz, bz = p[f"gru{j}.Wz"], p[f"gru{j}.Uz"], p[f"gru{j}.bz"]
        Wr, Ur, br = p[f"gru{j}.Wr"], p[f"gru{j}.Ur"], p[f"gru{j}.br"]
        Wc, Uc, bc = p[f"gru{j}.Wc"], p[f"gru{j}.Uc"], p[f"gru{j}.bc"]
        # input projections for all timesteps at once
        xz = h @ Wz.T + bz
        xr = h @ Wr.T + br
        xc = h @ Wc.T + bc
        hs = np.zeros((B, T, H), dtype=dt)
        h_prev = np.zeros((B, T, H), dtype=dt)
        zs = np.empty((B, T, H), dtype=dt)
        rs = np.empty((B, T, H), dtype=dt)
        cs = np.empty((B, T, H), dtype=dt)
        state = np.zeros((B, H), dtype=dt)
        for t in range(T):
            h_prev[:, t] = state
            z = _sigmoid(xz[:, t] + state @ Uz.T)
            r = _sigmoid(xr[:, t] + state @ Ur.T)
            c = np.tanh(xc[:, t] + (r * state) @ Uc.T)
            state = (1.0 - z) * state + z * c
            zs[:, t], rs[:, t], cs[:, t], hs[:, t] = z, r, c, state
        trace.gru.append(GRUCache(h, h_prev, zs, rs, cs, hs))
        h = hs

    trace.X = h[:, -1, :].copy()
    trace.O = trace.X @ p["out.W"].T + p["out.b"]
    return trace


def backward(net: NetworkState, trace: ForwardTrace, grad_O, grad_X) -> dict[str, np.ndarray]:
    """Gradients of a loss that sends ``grad_O`` into O and ``grad_X`` into X.

    Both upstream gradients have the batch shape of the trace, (B, C) and
    (B, n); 1-D inputs are accepted for a single-sample trace.  Parameter
    gradients are summed over the batch.
    """
    arch = net.arch
    p = net.params
    gO = np.asarray(grad_O, dtype=np.float64)
    gX = np.asarray(grad_X, dtype=np.float64)
    if gO.ndim == 1:
        gO = gO[None]
    if gX.ndim == 1:
        gX = gX[None]
    B, T = trace.frames.shape[:2]
    n = arch.representation_dim
    if gO.shape != (B, arch.n_classes) or gX.shape != (B, n):
        raise ShapeError(
            f"upstream gradients {gO.shape}, {gX.shape} do not match batch {B}, C={arch.n_classes}, n={n}"
        )
    if trace.X is None or trace.X.shape != (B, n) or len(trace.gru) != len(arch.gru):
        raise ShapeError("trace was not produced by this network")

    grads = zeros_like_params(net)
    grads["out.W"] = gO.T @ trace.X
    grads["out.b"] = gO.sum(axis=0)
    dX = gX + gO @ p["out.W"]

    # gradient w.r.t. the sequence output of the topmost layer
    width = n
    d_seq = np.zeros((B, T, width))
    d_seq[:, -1] = dX

    for j in reversed(range(len(arch.gru))):
        cache = trace.gru[j]
        Wz, Uz = p[f"gru{j}.Wz"], p[f"gru{j}.Uz"]
        Wr, Ur = p[f"gru{j}.Wr"], p[f"gru{j}.Ur"]
        Wc, Uc = p[f"gru{j}.Wc"], p[f"gru{j}.Uc"]
        H = arch.gru[j]
        d_in = np.zeros_like(cache.inputs)
        daz_all = np.empty((B, T, H))
        dar_all = np.empty((B, T, H))
        dac_all = np.empty((B, T, H))
        dUz = np.zeros_like(Uz)
        dUr = np.zeros_like(Ur)
        dUc = np.zeros_like(Uc)
        dh_next = np.zeros((B, H))
        for t in reversed(range(T)):
            dh = d_seq[:, t] + dh_next
            hp = cache.h_prev[:, t]
            z, r, c = cache.z[:, t], cache.r[:, t], cache.c[:, t]
            dac = dh * z * (1.0 - c * c)
            daz = dh * (c - hp) * z * (1.0 - z)
            d_rh = dac @ Uc
            dar = d_rh * hp * r * (1.0 - r)
            dh_next = dh * (1.0 - z) + d_rh * r + daz @ Uz + dar @ Ur
            dUc += dac.T @ (r * hp)
            dUz += daz.T @ hp
            dUr += dar.T @ hp
            daz_all[:, t], dar_all[:, t], dac_all[:, t] = daz, dar, dac
        xin = cache.inputs.reshape(B * T, -1)
        for g, da, W in (("z", daz_all, Wz), ("r", dar_all, Wr), ("c", dac_all, Wc)):
            flat = da.reshape(B * T, H)
            grads[f"gru{j}.W{g}"] = flat.T @ xin
            grads[f"gru{j}.b{g}"] = flat.sum(axis=0)
            d_in += da @ W
        grads[f"gru{j}.Uz"] = dUz
        grads[f"gru{j}.Ur"] = dUr
        grads[f"gru{j}.Uc"] = dUc
        d_seq = d_in

    if trace.dropout_mask is not None:
        d_seq = d_seq * trace.dropout_mask

    for i in reversed(range(len(arch.encoder))):
        a = trace.enc_pre[i]
        da = d_seq * (a > 0) if arch.activation == "relu" else d_seq
        prev = trace.enc_out[i - 1] if i > 0 else trace.frames
        flat = da.reshape(-1, da.shape[-1])
        grads[f"enc{i}.W"] = flat.T @ prev.reshape(-1, prev.shape[-1])
        grads[f"enc{i}.b"] = flat.sum(axis=0)
        d_seq = da @ p[f"enc{i}.W"]
    return grads


LossFn = Callable[[np.ndarray, np.ndarray], tuple[float, np.ndarray, np.ndarray]]


def grad_check(
    net: NetworkState,
    frames,
    loss: LossFn,
    step: float = 1e-5,
    order: int = 4,
    precision=np.longdouble,
) -> float:
    """Worst relative error between analytic and numeric parameter gradients.

    ``loss(O, X)`` returns ``(value, dvalue/dO, dvalue/dX)``; only the value is
    used for the numeric side, which is evaluated in ``precision`` (extended
    by default, so rounding noise stays far below the smallest gradients).
    ``order`` selects the central stencil (2: two-point, 4: four-point).  Relative error per entry is
    ``|a - b| / max(|a|, |b|, 1e-8)``.
    """
    if order not in (2, 4):
        raise ConfigError("order must be 2 or 4")
    trace = forward(net, frames)
    _, gO, gX = loss(trace.O, trace.X)
    analytic = backward(net, trace, gO, gX)

    probe = net.copy()
    probe.params = {k: v.astype(precision) for k, v in probe.params.items()}
    probe_frames = np.asarray(frames).astype(precision)

    def value():
        tr = forward(probe, probe_frames)
        return loss(tr.O, tr.X)[0]

    worst = 0.0
    for name, theta in probe.params.items():
        flat = theta.reshape(-1)
        a_flat = analytic[name].reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            if order == 2:
                flat[k] = orig + step
                fp = value()
                flat[k] = orig - step
                fm = value()
                num = (fp - fm) / (2 * step)
            else:
                vals = []
                for mult in (2, 1, -1, -2):
                    flat[k] = orig + mult * step
                    vals.append(value())
                num = (8 * (vals[1] - vals[2]) - (vals[0] - vals[3])) / (12 * step)
            flat[k] = orig
            a = a_flat[k]
            num = float(num)
            err = abs(a - num) / max(abs(a), abs(num), 1e-8)
            worst = max(worst, err)
    return worst


def save_checkpoint(net: NetworkState, path) -> None:
    doc = {
        "format_version": CHECKPOINT_VERSION,
        "spec": net.arch.to_dict(),
        "seed": net.seed,
        "init_std": net.init_std,
        "bias_init": net.bias_init,
        "parameters": {k: v.reshape(-1).tolist() for k, v in net.params.items()},
    }
    Path(path).write_text(json.dumps(doc, indent=1) + "\n")


def load_checkpoint(path) -> NetworkState:
    try:
        doc = json.loads(Path(path).read_text())
        if doc.get("format_version") != CHECKPOINT_VERSION:
            raise ParseError(f"{path}: unsupported checkpoint version {doc.get('format_version')!r}")
        arch = ArchSpec.from_dict(doc["spec"])
        params = {}
        for name, shape in arch.parameter_shapes().items():
            arr = np.asarray(doc["parameters"][name], dtype=np.float64)
            if arr.size != int(np.prod(shape)):
                raise ParseError(f"{path}: parameter {name} has {arr.size} values, expected shape {shape}")
            params[name] = arr.reshape(shape)
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise ParseError(f"{path}: malformed checkpoint ({exc})") from exc
    return NetworkState(arch, params, int(doc["seed"]), float(doc["init_std"]), float(doc["bias_init"]))
