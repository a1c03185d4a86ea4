"""Adversarial encoder/decoder/classifier stage that maps three modalities into one embedding space."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .data import MODALITIES
from .numcore import Adam, DenseLayer, DivergenceError, Module, Sequential, ShapeError, Tensor, as_tensor

LOG_CLAMP = 1e-7
W_MIN, W_MAX = 0.1, 10.0
D_EPS = 1e-12


@dataclass
class LossBreakdown:
    fal: float | None
    tal: float | None
    rl: float | None
    cl: float | None
    total: float

    def to_dict(self):
        return asdict(self)


def _check_modality(m):
    if m not in MODALITIES:
        raise ValueError(f"unknown modality {m!r}; expected one of {MODALITIES}")


def _safe_log(p):
    return p.clip(LOG_CLAMP, 1.0 - LOG_CLAMP).log()


class EmbeddingStage(Module):
    def __init__(self, dim, k, num_classes, target="l", rng=None):
        _check_modality(target)
        rng = rng if rng is not None else np.random.default_rng(0)
        self.dim, self.k, self.num_classes, self.target = dim, k, num_classes, target
        self.encoders = {
            m: Sequential(DenseLayer(dim, k, "leaky_relu", rng), DenseLayer(k, k, "tanh", rng))
            for m in MODALITIES
        }
        self.decoders = {
            m: Sequential(DenseLayer(k, k, "leaky_relu", rng), DenseLayer(k, dim, "linear", rng))
            for m in MODALITIES
        }
        self.discriminator = Sequential(DenseLayer(k, k, "leaky_relu", rng), DenseLayer(k, 1, "sigmoid", rng))
        self.classifier = DenseLayer(k, num_classes, "softmax", rng)
        self.w = Tensor(np.array(1.0), requires_grad=True)

    @property
    def sources(self):
        return tuple(m for m in MODALITIES if m != self.target)

    def group(self, name):
        """Parameter tensors of one named group: encoders, decoders, discriminator, classifier, w."""
        if name == "encoders":
            return [p for m in MODALITIES for p in self.encoders[m].parameters()]
        if name == "decoders":
            return [p for m in MODALITIES for p in self.decoders[m].parameters()]
        if name == "discriminator":
            return self.discriminator.parameters()
        if name == "classifier":
            return self.classifier.parameters()
        if name == "w":
            return [self.w]
        raise KeyError(name)

    def clamp_w(self):
        self.w.values = np.clip(self.w.values, W_MIN, W_MAX)

    # -- forward pieces ---------------------------------------------------------

    def encode(self, x, m):
        _check_modality(m)
        x = as_tensor(x)
        if x.ndim != 2 or x.shape[1] != self.dim:
            raise ShapeError(f"encoder {m!r} expects (batch, {self.dim}), got {x.shape}")
        return self.encoders[m](x)

    def encode_all(self, xs):
        return {m: self.encode(xs[m], m) for m in MODALITIES}

    def decode(self, e, m):
        _check_modality(m)
        e = as_tensor(e)
        if e.ndim != 2 or e.shape[1] != self.k:
            raise ShapeError(f"decoder {m!r} expects (batch, {self.k}), got {e.shape}")
        return self.decoders[m](e)

    def discriminate(self, e):
        # float64 sigmoid rounds to exactly 0 or 1 past |x| ~ 37
        return self.discriminator(as_tensor(e)).clip(D_EPS, 1.0 - D_EPS)

    def classify(self, e):
        return self.classifier(as_tensor(e))

    # -- losses -------------------------------------------------------------------

    def loss_fal(self, src1, src2):
        d1, d2 = self.discriminate(src1), self.discriminate(src2)
        return -self.w * (_safe_log(d1) + _safe_log(d2)).mean()

    def loss_tal(self, target_e, src1, src2):
        d1, d2, dt = self.discriminate(src1), self.discriminate(src2), self.discriminate(target_e)
        return -self.w * (_safe_log(1.0 - d1) + _safe_log(1.0 - d2) + _safe_log(dt)).mean()


def loss_rl(recon, xs):
    """Sum over modalities of the batch-mean Euclidean reconstruction error."""
    total = None
    for m in MODALITIES:
        term = (recon[m] - as_tensor(xs[m])).norm(axis=-1).mean()
        total = term if total is None else total + term
    return total


def loss_cl(preds, y):
    y = as_tensor(y)
    total = None
    for m in MODALITIES:
        term = (preds[m] - y).norm(axis=-1).mean()
        total = term if total is None else total + term
    return total


PHASE_GROUPS = {
    1: ("encoders", "decoders", "w"),
    2: ("discriminator", "w"),
    3: ("encoders", "classifier"),
}


def phase_groups(phase, no_adv=False, no_decoder=False, no_classifier=False):
    """Parameter groups a phase may change under the given ablations; empty if skipped."""
    if phase == 1:
        groups = []
        if not no_decoder or not no_adv:
            groups.append("encoders")
        if not no_decoder:
            groups.append("decoders")
        if not no_adv:
            groups.append("w")
        return tuple(groups)
    if phase == 2:
        return () if no_adv else PHASE_GROUPS[2]
    if phase == 3:
        return () if no_classifier else PHASE_GROUPS[3]
    raise ValueError(phase)


class StageTrainer:
    """Runs the three sequential per-batch updates, each with its own Adam state."""

    def __init__(self, stage, lr=1e-3, lam=0.5, no_adv=False, no_decoder=False, no_classifier=False):
        if not 0.0 <= lam <= 1.0:
            raise ValueError(f"lambda must lie in [0, 1], got {lam}")
        if no_adv and no_decoder:
            raise ValueError("no_adv and no_decoder together leave phase 1 without a loss")
        self.stage = stage
        self.lam = lam
        self.no_adv, self.no_decoder, self.no_classifier = no_adv, no_decoder, no_classifier
        self.optimizers = {}
        for phase in (1, 2, 3):
            groups = self.groups(phase)
            if groups:
                self.optimizers[phase] = Adam(self._params(phase, groups), lr=lr)

    def groups(self, phase):
        return phase_groups(phase, self.no_adv, self.no_decoder, self.no_classifier)

    def _params(self, phase, groups):
        stage = self.stage
        params = []
        for g in groups:
            if g == "encoders" and phase == 1 and self.no_decoder:
                # fal alone never reaches the target encoder
                params += [p for m in stage.sources for p in stage.encoders[m].parameters()]
            else:
                params += stage.group(g)
        return params

    def phase_params(self, phase):
        opt = self.optimizers.get(phase)
        return [] if opt is None else opt.params

    # -- losses per phase (no parameter updates) --------------------------------

    def phase1_loss(self, batch):
        stage = self.stage
        emb = stage.encode_all(batch.x)
        fal = rl = None
        loss = None
        if not self.no_adv:
            s1, s2 = stage.sources
            fal = stage.loss_fal(emb[s1], emb[s2])
            loss = self.lam * fal
        if not self.no_decoder:
            recon = {m: stage.decode(emb[m], m) for m in MODALITIES}
            rl = loss_rl(recon, batch.x)
            loss = (1.0 - self.lam) * rl if loss is None else loss + (1.0 - self.lam) * rl
        return loss, fal, rl

    def phase2_loss(self, batch):
        stage = self.stage
        emb = {m: stage.encode(batch.x[m], m).detach() for m in MODALITIES}
        s1, s2 = stage.sources
        tal = stage.loss_tal(emb[stage.target], emb[s1], emb[s2])
        return 0.5 * tal, tal

    def phase3_loss(self, batch):
        stage = self.stage
        emb = stage.encode_all(batch.x)
        preds = {m: stage.classify(emb[m]) for m in MODALITIES}
        cl = loss_cl(preds, batch.y)
        return cl, cl

    # -- updates ---------------------------------------------------------------------

    def _update(self, phase, loss, seen):
        if not np.all(np.isfinite(loss.values)):
            raise DivergenceError(f"phase {phase} loss is not finite; losses so far: {seen}")
        self.stage.zero_grad()
        loss.backward()
        self.optimizers[phase].step()
        self.stage.zero_grad()
        if "w" in self.groups(phase):
            self.stage.clamp_w()

    def train_step(self, batch):
        fal = tal = rl = cl = None
        if 1 in self.optimizers:
            loss, fal_t, rl_t = self.phase1_loss(batch)
            fal = None if fal_t is None else fal_t.item()
            rl = None if rl_t is None else rl_t.item()
            self._update(1, loss, dict(fal=fal, rl=rl))
        if 2 in self.optimizers:
            loss, tal_t = self.phase2_loss(batch)
            tal = tal_t.item()
            self._update(2, loss, dict(fal=fal, rl=rl, tal=tal))
        if 3 in self.optimizers:
            loss, cl_t = self.phase3_loss(batch)
            cl = cl_t.item()
            self._update(3, loss, dict(fal=fal, rl=rl, tal=tal, cl=cl))
        total = 0.0
        if fal is not None:
            total += self.lam * fal
        if rl is not None:
            total += (1.0 - self.lam) * rl
        if tal is not None:
            total += 0.5 * tal
        if cl is not None:
            total += cl
        breakdown = LossBreakdown(fal, tal, rl, cl, total)
        if not math.isfinite(total):
            raise DivergenceError(f"non-finite loss in embedding stage: {breakdown}")
        return breakdown

