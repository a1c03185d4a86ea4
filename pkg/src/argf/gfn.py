"""Hierarchical graph fusion over unimodal, bimodal and trimodal vertices."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numcore import DenseLayer, Module, Sequential, ShapeError, as_tensor, concat, softmax, stack

UNIMODAL = ("a", "v", "l")
BIMODAL = (("al", ("a", "l")), ("av", ("a", "v")), ("vl", ("v", "l")))
TRIMODAL = (
    ("al·av", ("al", "av")),
    ("al·vl", ("al", "vl")),
    ("av·vl", ("av", "vl")),
    ("al+v", ("al", "v")),
    ("av+l", ("av", "l")),
    ("vl+a", ("vl", "a")),
)
VERTEX_ORDER = UNIMODAL + tuple(n for n, _ in BIMODAL) + tuple(n for n, _ in TRIMODAL)


def fusion_mlp(k, rng):
    return Sequential(DenseLayer(2 * k, k, "leaky_relu", rng), DenseLayer(k, k, "tanh", rng))


class DecisionNet(Module):
    """Per-sample standardisation followed by tanh -> tanh -> softmax dense layers."""

    eps = 1e-6

    def __init__(self, in_dim, hidden, num_classes, rng):
        self.in_dim = in_dim
        self.net = Sequential(
            DenseLayer(in_dim, hidden, "tanh", rng),
            DenseLayer(hidden, hidden, "tanh", rng),
            DenseLayer(hidden, num_classes, "softmax", rng),
        )

    def __call__(self, omega):
        omega = as_tensor(omega)
        if omega.ndim != 2 or omega.shape[1] != self.in_dim:
            raise ShapeError(f"decision net expects (batch, {self.in_dim}), got {omega.shape}")
        return self.net(standardize(omega, self.eps))


def standardize(x, eps=1e-6):
    centred = x - x.mean(axis=-1, keepdims=True)
    var = (centred * centred).mean(axis=-1, keepdims=True)
    return centred / (var + eps).sqrt()


def similarity(v1, v2):
    """Inner product of the row-wise softmax of two information vectors, shape (batch, 1)."""
    return (softmax(v1, axis=-1) * softmax(v2, axis=-1)).sum(axis=-1, keepdims=True)


def raw_vertex_weight(alpha1, alpha2, sim, offset=0.5):
    return (alpha1 + alpha2) / (sim + offset)


def vertex_weights_layer(parent_alphas, parent_sims, offset=0.5):
    """Softmax across a layer of the per-vertex scores (alpha1 + alpha2) / (S + offset).

    ``parent_alphas`` is a list of (alpha1, alpha2) pairs and ``parent_sims`` the matching
    similarities, each (batch, 1). Returns (batch, n_vertices).
    """
    raw = [raw_vertex_weight(a1, a2, s, offset) for (a1, a2), s in zip(parent_alphas, parent_sims)]
    return concat(raw, axis=-1).softmax(axis=-1)


def weighted_sum(weights, infos):
    """sum_j weights[:, j] * infos[j]; weights (batch, n), infos n x (batch, k)."""
    return (weights.reshape(weights.shape + (1,)) * stack(infos, axis=1)).sum(axis=1)


@dataclass
class GfnGraph:
    """Everything a forward pass computed, keyed by vertex name (see VERTEX_ORDER)."""

    info: dict  # name -> Tensor (batch, k)
    alpha: dict  # name -> Tensor (batch, 1); raw MAN output for layer 1, normalised after
    similarity: dict  # name -> Tensor (batch, 1), layers 2 and 3
    edge_weight: dict  # (parent, child) -> ndarray (batch,), alpha_parent / (S_child + offset)
    unimodal: object
    bimodal: object
    trimodal: object

    def vertex_weights(self):
        """(batch, 12) array of vertex weights in VERTEX_ORDER."""
        return np.concatenate([self.alpha[n].values for n in VERTEX_ORDER], axis=1)


class GraphFusionNetwork(Module):
    def __init__(self, k, num_classes, rng=None, sim_offset=0.5, share_vertex_mlp=True):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.k, self.num_classes = k, num_classes
        self.sim_offset = sim_offset
        self.share_vertex_mlp = share_vertex_mlp
        self.man = DenseLayer(k, 1, "sigmoid", rng)
        if share_vertex_mlp:
            self.mlp2 = fusion_mlp(k, rng)
            self.mlp3 = fusion_mlp(k, rng)
        else:
            self.mlp2 = {name: fusion_mlp(k, rng) for name, _ in BIMODAL}
            self.mlp3 = {name: fusion_mlp(k, rng) for name, _ in TRIMODAL}
        self.dec = DecisionNet(3 * k, k, num_classes, rng)

    def _mlp(self, layer, name):
        nets = self.mlp2 if layer == 2 else self.mlp3
        return nets if self.share_vertex_mlp else nets[name]

    def man_weights(self, va, vv, vl):
        return self.man(va), self.man(vv), self.man(vl)

    def bimodal_vertex(self, v1, v2, name="al"):
        return self._mlp(2, name)(concat([v1, v2], axis=-1))

    def trimodal_vertex(self, v1, v2, name="al·av"):
        return self._mlp(3, name)(concat([v1, v2], axis=-1))

    def _fuse_layer(self, layer, spec, info, alpha, graph):
        names, sims, pairs, infos = [], [], [], []
        for name, (p1, p2) in spec:
            if layer == 2:
                v = self.bimodal_vertex(info[p1], info[p2], name)
            else:
                v = self.trimodal_vertex(info[p1], info[p2], name)
            s = similarity(info[p1], info[p2])
            names.append(name)
            sims.append(s)
            pairs.append((alpha[p1], alpha[p2]))
            infos.append(v)
            info[name] = v
            graph.similarity[name] = s
            for parent in (p1, p2):
                graph.edge_weight[(parent, name)] = (
                    alpha[parent].values / (s.values + self.sim_offset)
                ).reshape(-1)
        weights = vertex_weights_layer(pairs, sims, self.sim_offset)
        for j, name in enumerate(names):
            alpha[name] = weights[:, j : j + 1]
        return weighted_sum(weights, infos)

    def forward(self, va, vv, vl):
        va, vv, vl = as_tensor(va), as_tensor(vv), as_tensor(vl)
        for v in (va, vv, vl):
            if v.ndim != 2 or v.shape[1] != self.k:
                raise ShapeError(f"GFN expects (batch, {self.k}) inputs, got {v.shape}")
        info = {"a": va, "v": vv, "l": vl}
        alpha = dict(zip(UNIMODAL, self.man_weights(va, vv, vl)))
        graph = GfnGraph(info, alpha, {}, {}, None, None, None)

        u = unimodal_output([alpha[m] for m in UNIMODAL], [info[m] for m in UNIMODAL])
        b = self._fuse_layer(2, BIMODAL, info, alpha, graph)
        t = self._fuse_layer(3, TRIMODAL, info, alpha, graph)
        graph.unimodal, graph.bimodal, graph.trimodal = u, b, t
        return self.decision(u, b, t), graph

    __call__ = forward

    def decision(self, u, b, t):
        return self.dec(concat([u, b, t], axis=-1))


def unimodal_output(alphas, infos):
    total = None
    for a, v in zip(alphas, infos):
        term = a * v
        total = term if total is None else total + term
    return total * (1.0 / 3.0)


def bimodal_output(weights, infos):
    return weighted_sum(as_tensor(weights), infos)
