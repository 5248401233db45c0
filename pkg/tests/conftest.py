import json
import math
from pathlib import Path

import numpy as np
import pytest

from centroid_adapt.clustering import CentroidSet
from centroid_adapt.data import SyntheticSpec, generate
from centroid_adapt.nn import ArchSpec, init_network

FIXTURES = Path(__file__).parent / "fixtures"


def scalar_sigmoid(a):
    return 1.0 / (1.0 + math.exp(-a))


def scalar_forward(net, frames):
    """Plain-loop forward pass; shares nothing with the vectorized code."""
    arch, p = net.arch, net.params
    seq = [list(map(float, f)) for f in frames]
    for i in range(len(arch.encoder)):
        W, b = p[f"enc{i}.W"], p[f"enc{i}.b"]
        out = []
        for f in seq:
            row = []
            for u in range(W.shape[0]):
                a = b[u] + sum(W[u, v] * f[v] for v in range(W.shape[1]))
                row.append(max(a, 0.0) if arch.activation == "relu" else a)
            out.append(row)
        seq = out
    for j, H in enumerate(arch.gru):
        g = {k: p[f"gru{j}.{k}"] for k in ("Wz", "Uz", "bz", "Wr", "Ur", "br", "Wc", "Uc", "bc")}
        h = [0.0] * H
        out = []
        for f in seq:
            z, r = [0.0] * H, [0.0] * H
            for u in range(H):
                z[u] = scalar_sigmoid(g["bz"][u] + sum(g["Wz"][u, v] * f[v] for v in range(len(f))) + sum(g["Uz"][u, v] * h[v] for v in range(H)))
                r[u] = scalar_sigmoid(g["br"][u] + sum(g["Wr"][u, v] * f[v] for v in range(len(f))) + sum(g["Ur"][u, v] * h[v] for v in range(H)))
            new = [0.0] * H
            for u in range(H):
                c = math.tanh(g["bc"][u] + sum(g["Wc"][u, v] * f[v] for v in range(len(f))) + sum(g["Uc"][u, v] * r[v] * h[v] for v in range(H)))
                new[u] = (1.0 - z[u]) * h[u] + z[u] * c
            h = new
            out.append(h)
        seq = out
    X = seq[-1]
    W, b = p["out.W"], p["out.b"]
    O = [b[c] + sum(W[c, v] * X[v] for v in range(len(X))) for c in range(W.shape[0])]
    return np.array(X), np.array(O)


def random_centroids(rng, C, n, scale=1.0):
    perm = rng.permutation(C)
    return CentroidSet(rng.standard_normal((C, n)) * scale, perm)


def small_net(seed=0, input_dim=4, encoder=(5,), gru=(4, 3), n_classes=3, activation="relu", init_std=0.5, bias_init=0.1):
    return init_network(ArchSpec(input_dim, encoder, gru, n_classes, activation), seed, init_std, bias_init)


def load_fixture(name):
    return json.loads((FIXTURES / name).read_text())


@pytest.fixture(scope="session")
def small_spec():
    return SyntheticSpec(seed=11, train_per_class=8, eval_per_class=4, sequence_length=5)


@pytest.fixture(scope="session")
def small_data(small_spec):
    return generate(small_spec)
