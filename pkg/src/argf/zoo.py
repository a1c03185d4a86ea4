"""Baseline fusion heads that can stand in for the graph fusion network."""

from __future__ import annotations

import numpy as np

from .gfn import DecisionNet, GraphFusionNetwork
from .numcore import Module, ShapeError, Tensor, as_tensor, concat

FUSION_KINDS = ("gfn", "concat_fc", "mult_fc", "weighted_avg", "tensor", "lmf")
TENSOR_MAX_K = 16


def append_one(x):
    x = as_tensor(x)
    return concat([x, Tensor(np.ones((x.shape[0], 1)))], axis=-1)


def outer3(za, zv, zl):
    """Flattened per-sample outer product, shape (batch, da * dv * dl)."""
    b = za.shape[0]
    da, dv, dl = za.shape[1], zv.shape[1], zl.shape[1]
    prod = za.reshape(b, da, 1, 1) * zv.reshape(b, 1, dv, 1) * zl.reshape(b, 1, 1, dl)
    return prod.reshape(b, da * dv * dl)


class ConcatFC(Module):
    def __init__(self, k, num_classes, rng):
        self.dec = DecisionNet(3 * k, k, num_classes, rng)

    def __call__(self, xa, xv, xl):
        return self.dec(concat([xa, xv, xl], axis=-1))


class MultFC(Module):
    def __init__(self, k, num_classes, rng):
        self.dec = DecisionNet(k, k, num_classes, rng)

    def fused(self, xa, xv, xl):
        return as_tensor(xa) * xv * xl

    def __call__(self, xa, xv, xl):
        return self.dec(self.fused(xa, xv, xl))


class WeightedAverage(Module):
    def __init__(self, k, num_classes, rng):
        self.logits = Tensor(np.zeros(3), requires_grad=True)
        self.dec = DecisionNet(k, k, num_classes, rng)

    def weights(self):
        return self.logits.softmax(axis=-1)

    def __call__(self, xa, xv, xl):
        w = self.weights()
        fused = w[0] * as_tensor(xa) + w[1] * as_tensor(xv) + w[2] * as_tensor(xl)
        return self.dec(fused)


class TensorFusion(Module):
    def __init__(self, k, num_classes, rng):
        if k > TENSOR_MAX_K:
            raise ValueError(f"tensor fusion needs (k+1)^3 features; k={k} exceeds the limit {TENSOR_MAX_K}")
        self.dec = DecisionNet((k + 1) ** 3, k, num_classes, rng)

    def __call__(self, xa, xv, xl):
        return self.dec(outer3(append_one(xa), append_one(xv), append_one(xl)))


class LowRankFusion(Module):
    """Rank-r factorised tensor fusion mapping straight to N outputs, then softmax."""

    def __init__(self, k, num_classes, rng, rank=4):
        self.k, self.num_classes, self.rank = k, num_classes, rank
        limit = np.sqrt(6.0 / (k + 1 + num_classes))
        self.factors = [
            Tensor(rng.uniform(-limit, limit, size=(rank, k + 1, num_classes)), requires_grad=True)
            for _ in range(3)
        ]
        limit = np.sqrt(6.0 / (1 + rank))
        self.rank_weights = Tensor(rng.uniform(-limit, limit, size=rank), requires_grad=True)
        self.bias = Tensor(np.zeros(num_classes), requires_grad=True)

    def contract(self, xa, xv, xl):
        """Pre-softmax fused output, (batch, N)."""
        r, n = self.rank, self.num_classes
        prod = None
        for x, f in zip((xa, xv, xl), self.factors):
            z = append_one(x)
            b = z.shape[0]
            # (k+1, r*N), rank-major column blocks, so one matmul covers every rank
            flat = concat([f[i] for i in range(r)], axis=-1)
            proj = (z @ flat).reshape(b, r, n)
            prod = proj if prod is None else prod * proj
        return (prod * self.rank_weights.reshape(1, r, 1)).sum(axis=1) + self.bias

    def full_weight(self):
        """Explicit (k+1, k+1, k+1, N) weight tensor the factors represent."""
        fa, fv, fl = (f.values for f in self.factors)
        return np.einsum("r,ran,rbn,rcn->abcn", self.rank_weights.values, fa, fv, fl)

    def __call__(self, xa, xv, xl):
        return self.contract(xa, xv, xl).softmax(axis=-1)


class GfnHead(Module):
    """Adapter giving the GFN the same call signature as the baselines."""

    def __init__(self, k, num_classes, rng, sim_offset=0.5, share_vertex_mlp=True):
        self.gfn = GraphFusionNetwork(k, num_classes, rng, sim_offset, share_vertex_mlp)

    def __call__(self, xa, xv, xl):
        return self.gfn(xa, xv, xl)[0]

    def graph(self, xa, xv, xl):
        return self.gfn(xa, xv, xl)


def build_fusion(kind, k, num_classes, rng, lmf_rank=4, sim_offset=0.5, share_vertex_mlp=True):
    if kind == "gfn":
        return GfnHead(k, num_classes, rng, sim_offset, share_vertex_mlp)
    if kind == "concat_fc":
        return ConcatFC(k, num_classes, rng)
    if kind == "mult_fc":
        return MultFC(k, num_classes, rng)
    if kind == "weighted_avg":
        return WeightedAverage(k, num_classes, rng)
    if kind == "tensor":
        return TensorFusion(k, num_classes, rng)
    if kind == "lmf":
        return LowRankFusion(k, num_classes, rng, lmf_rank)
    raise ValueError(f"unknown fusion kind {kind!r}; expected one of {FUSION_KINDS}")


def fuse(strategy, xa, xv, xl):
    xs = [as_tensor(x) for x in (xa, xv, xl)]
    shapes = {x.shape for x in xs}
    if len(shapes) != 1:
        raise ShapeError(f"fusion inputs must share one shape, got {sorted(shapes)}")
    return strategy(*xs)
