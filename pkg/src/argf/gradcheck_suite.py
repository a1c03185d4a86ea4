"""Finite-difference checks for every loss, module and fusion strategy.

Each check builds a small instance (k <= 6, batch <= 3), reduces its output
to a scalar with a fixed random projection and compares backprop against
central differences over every parameter and input.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .data import MODALITIES, ModalityBatch, one_hot
from .gfn import DecisionNet, GraphFusionNetwork
from .model import EmbeddingStage, StageTrainer, loss_cl, loss_rl
from .numcore import Tensor, gradcheck
from .zoo import FUSION_KINDS, build_fusion

TOLERANCE = 1e-4


@dataclass(frozen=True)
class CheckResult:
    name: str
    max_rel_error: float
    num_values: int

    @property
    def passed(self):
        return self.max_rel_error < TOLERANCE


def _leaf(rng, *shape, scale=1.0):
    return Tensor(rng.normal(scale=scale, size=shape), requires_grad=True)


def _module_check(name, module, inputs, forward, rng):
    proj = rng.normal(size=forward().shape)
    fn = lambda: (forward() * Tensor(proj)).sum()
    params = module.parameters() + list(inputs)
    return CheckResult(name, gradcheck(fn, params), sum(p.values.size for p in params))


def _loss_check(name, fn, params):
    return CheckResult(name, gradcheck(fn, params), sum(p.values.size for p in params))


def stage_checks(rng, k=4, dim=5, num_classes=3, batch=3):
    stage = EmbeddingStage(dim, k, num_classes, rng=rng)
    stage.w.values = np.array(1.7)
    x = {m: _leaf(rng, batch, dim) for m in MODALITIES}
    e = {m: _leaf(rng, batch, k, scale=0.5) for m in MODALITIES}
    y = Tensor(one_hot(rng.integers(0, num_classes, batch), num_classes))
    out = []
    for m in MODALITIES:
        enc = stage.encoders[m]
        out.append(_module_check(f"encoder[{m}]", enc, [x[m]], lambda m=m: stage.encode(x[m], m), rng))
        dec = stage.decoders[m]
        out.append(_module_check(f"decoder[{m}]", dec, [e[m]], lambda m=m: stage.decode(e[m], m), rng))
    out.append(_module_check("discriminator", stage.discriminator, [e["a"]], lambda: stage.discriminate(e["a"]), rng))
    out.append(_module_check("classifier", stage.classifier, [e["a"]], lambda: stage.classify(e["a"]), rng))

    d_params = stage.discriminator.parameters() + [stage.w]
    out.append(_loss_check("loss_fal", lambda: stage.loss_fal(e["a"], e["v"]), d_params + [e["a"], e["v"]]))
    out.append(_loss_check("loss_tal", lambda: stage.loss_tal(e["l"], e["a"], e["v"]), d_params + list(e.values())))
    recon = {m: _leaf(rng, batch, dim) for m in MODALITIES}
    out.append(_loss_check("loss_rl", lambda: loss_rl(recon, x), list(recon.values()) + list(x.values())))
    logits = [_leaf(rng, batch, num_classes) for _ in MODALITIES]
    preds = lambda: {m: lg.softmax(axis=-1) for m, lg in zip(MODALITIES, logits)}
    out.append(_loss_check("loss_cl", lambda: loss_cl(preds(), y), logits))

    batch_ = ModalityBatch({m: x[m].values for m in MODALITIES}, y.values, y.values.argmax(axis=1), np.arange(batch))
    trainer = StageTrainer(stage, lam=0.3)
    out.append(_loss_check("phase1 objective", lambda: trainer.phase1_loss(batch_)[0], trainer.phase_params(1)))
    out.append(_loss_check("phase2 objective", lambda: trainer.phase2_loss(batch_)[0], trainer.phase_params(2)))
    out.append(_loss_check("phase3 objective", lambda: trainer.phase3_loss(batch_)[0], trainer.phase_params(3)))
    return out


def gfn_checks(rng, k=4, num_classes=3, batch=3):
    gfn = GraphFusionNetwork(k, num_classes, rng=rng, share_vertex_mlp=True)
    v = [_leaf(rng, batch, k) for _ in range(3)]
    out = [
        _module_check("MAN", gfn.man, v[:1], lambda: gfn.man(v[0]), rng),
        _module_check("MLP2", gfn.mlp2, v[:2], lambda: gfn.bimodal_vertex(v[0], v[1]), rng),
        _module_check("MLP3", gfn.mlp3, v[:2], lambda: gfn.trimodal_vertex(v[0], v[1]), rng),
    ]
    omega = _leaf(rng, batch, 3 * k)
    dec = DecisionNet(3 * k, k, num_classes, rng)
    out.append(_module_check("Dec", dec, [omega], lambda: dec(omega), rng))
    y = Tensor(one_hot(rng.integers(0, num_classes, batch), num_classes))

    def gfn_mse():
        diff = gfn(*v)[0] - y
        return (diff * diff).mean()

    out.append(_loss_check("GFN MSE", gfn_mse, gfn.parameters() + v))
    return out


def zoo_checks(rng, k=3, num_classes=2, batch=3):
    out = []
    for kind in FUSION_KINDS:
        head = build_fusion(kind, k, num_classes, rng, lmf_rank=3, share_vertex_mlp=False)
        v = [_leaf(rng, batch, k) for _ in range(3)]
        out.append(_module_check(f"fusion[{kind}]", head, v, lambda head=head, v=v: head(*v), rng))
    return out


def model_checks(rng, k=3, dim=4, num_classes=2, batch=3):
    # imported lazily: the harness pulls in multiprocessing machinery
    from .harness import ArgfModel, RunConfig, mse

    model = ArgfModel(RunConfig(k=k, seed=int(rng.integers(1 << 31))), dim, num_classes)
    xs = {m: rng.normal(size=(batch, dim)) for m in MODALITIES}
    y = one_hot(rng.integers(0, num_classes, batch), num_classes)
    params = model.head.parameters() + model.stage.group("encoders")
    return [_loss_check("full model MSE", lambda: mse(model(xs), y), params)]


def run_all(seed=0):
    """Run every check; returns (results, seconds)."""
    start = time.perf_counter()
    rng = np.random.default_rng(seed)
    results = stage_checks(rng) + gfn_checks(rng) + zoo_checks(rng) + model_checks(rng)
    return results, time.perf_counter() - start
