"""Training loop, evaluation metrics, grid search, ablations and exports."""

from __future__ import annotations

import itertools
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .data import MODALITIES, batches, make_batch
from .model import EmbeddingStage, StageTrainer
from .numcore import Adam, DenseLayer, DivergenceError, Module, Sequential, Tensor
from .zoo import FUSION_KINDS, GfnHead, build_fusion

log = logging.getLogger(__name__)

ABLATIONS = ("full", "no_adv", "no_classifier", "no_decoder")


@dataclass(frozen=True)
class RunConfig:
    k: int = 50
    lam: float = 0.5
    lr_embed: float = 1e-3
    lr_gfn: float = 1e-3
    batch_size: int = 32
    epochs: int = 200
    patience: int = 20
    target: str = "l"
    fusion: str = "gfn"
    no_adv: bool = False
    no_decoder: bool = False
    no_classifier: bool = False
    seed: int = 0
    sim_offset: float = 0.5
    lmf_rank: int = 4
    finetune_encoders: bool = True
    share_vertex_mlp: bool = True

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lam must lie in [0, 1], got {self.lam}")
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if not (self.lr_embed > 0 and self.lr_gfn > 0):
            raise ValueError("learning rates must be > 0")
        if self.batch_size < 1 or self.epochs < 0 or self.patience < 1 or self.lmf_rank < 1:
            raise ValueError("batch_size, patience and lmf_rank must be >= 1 and epochs >= 0")
        if self.target not in MODALITIES:
            raise ValueError(f"target must be one of {MODALITIES}, got {self.target!r}")
        if self.fusion not in FUSION_KINDS:
            raise ValueError(f"fusion must be one of {FUSION_KINDS}, got {self.fusion!r}")
        if self.no_adv and self.no_decoder:
            raise ValueError("no_adv and no_decoder cannot both be set")

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self):
        return asdict(self)


class ArgfModel(Module):
    """Embedding stage plus a fusion head (the GFN or one of the baselines)."""

    def __init__(self, config, dim, num_classes):
        rng = np.random.default_rng(config.seed)
        self.config = config
        self.dim, self.num_classes = dim, num_classes
        self.stage = EmbeddingStage(dim, config.k, num_classes, config.target, rng)
        self.head = build_fusion(
            config.fusion, config.k, num_classes, rng,
            lmf_rank=config.lmf_rank, sim_offset=config.sim_offset,
            share_vertex_mlp=config.share_vertex_mlp,
        )

    def embed(self, xs, detach=False):
        emb = self.stage.encode_all(xs)
        return {m: e.detach() for m, e in emb.items()} if detach else emb

    def forward(self, xs, detach_embeddings=False):
        emb = self.embed(xs, detach_embeddings)
        return self.head(emb["a"], emb["v"], emb["l"])

    __call__ = forward

    def graph(self, xs):
        if not isinstance(self.head, GfnHead):
            raise TypeError(f"vertex weights exist only for the gfn head, not {self.config.fusion!r}")
        emb = self.embed(xs, detach=True)
        return self.head.graph(emb["a"], emb["v"], emb["l"])[1]

    def save(self, path):
        arrays = {f"p:{name}": v for name, v in self.state_dict().items()}
        meta = json.dumps({"config": self.config.to_dict(), "dim": self.dim, "num_classes": self.num_classes})
        np.savez(path, __meta__=np.array(meta), **arrays)

    @classmethod
    def load(cls, path):
        with np.load(path) as data:
            meta = json.loads(str(data["__meta__"]))
            state = {key[2:]: data[key] for key in data.files if key.startswith("p:")}
        model = cls(RunConfig.from_dict(meta["config"]), meta["dim"], meta["num_classes"])
        model.load_state_dict(state)
        return model


# -- metrics ----------------------------------------------------------------------


@dataclass
class SplitMetrics:
    split: str
    count: int
    accuracy: float
    f1_per_class: list
    avg_f1: float
    confusion: list


def confusion_matrix(labels, preds, num_classes):
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(labels), np.asarray(preds)), 1)
    return cm


def metrics_from_confusion(cm, split="test"):
    """Accuracy, per-class F1 and support-weighted F1 from a (true x predicted) confusion matrix."""
    cm = np.asarray(cm)
    total = int(cm.sum())
    tp = np.diag(cm).astype(float)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    denom = 2 * tp + fp + fn
    f1 = np.divide(2 * tp, denom, out=np.zeros_like(tp), where=denom > 0)
    support = cm.sum(axis=1)
    avg = float((f1 * support).sum() / total) if total else 0.0
    acc = float(tp.sum() / total) if total else 0.0
    return SplitMetrics(split, total, acc, [float(x) for x in f1], avg, cm.tolist())


@dataclass
class MetricsReport:
    config: dict
    seed: int
    history: list = field(default_factory=list)
    best_epoch: int | None = None
    stopped_early: bool = False
    val: SplitMetrics | None = None
    test: SplitMetrics | None = None
    wall_clock_s: float | None = None

    @property
    def accuracy(self):
        return None if self.test is None else self.test.accuracy

    def to_dict(self, include_timing=False):
        d = asdict(self)
        if not include_timing:
            d.pop("wall_clock_s")
        return d

    def to_json(self, include_timing=False):
        return json.dumps(self.to_dict(include_timing), indent=2, sort_keys=True) + "\n"

    def write(self, path, include_timing=False):
        Path(path).write_text(self.to_json(include_timing))


def predict_proba(model, bundle, split, batch_size=512):
    idx = bundle.indices(split)
    out = np.zeros((len(idx), bundle.num_classes))
    for start in range(0, len(idx), batch_size):
        batch = make_batch(bundle, idx[start : start + batch_size])
        out[start : start + len(batch)] = model(batch.x).values
    return out, bundle.labels[idx]


def split_metrics(model, bundle, split):
    probs, labels = predict_proba(model, bundle, split)
    cm = confusion_matrix(labels, probs.argmax(axis=1), bundle.num_classes)
    return metrics_from_confusion(cm, split)


def evaluate(model, bundle, split="test"):
    report = MetricsReport(config=model.config.to_dict(), seed=model.config.seed)
    report.test = split_metrics(model, bundle, split)
    return report


# -- training -----------------------------------------------------------------------


class TrainingDiverged(RuntimeError):
    """Training hit a non-finite loss; ``model`` holds the last good checkpoint."""

    def __init__(self, message, model, report):
        super().__init__(message)
        self.model = model
        self.report = report


def mse(pred, y):
    diff = pred - Tensor(y)
    return (diff * diff).mean()


def fusion_step(model, optimizer, batch):
    loss = mse(model(batch.x, detach_embeddings=not model.config.finetune_encoders), batch.y)
    if not np.all(np.isfinite(loss.values)):
        raise DivergenceError(f"fusion MSE is not finite ({loss.values})")
    model.zero_grad()
    loss.backward()
    optimizer.step()
    model.zero_grad()
    return loss.item()


def fusion_params(model):
    params = model.head.parameters()
    if model.config.finetune_encoders:
        params = params + model.stage.group("encoders")
    return params


def _epoch_means(records):
    out = {}
    for key in ("fal", "tal", "rl", "cl", "total", "mse"):
        vals = [r[key] for r in records if r[key] is not None]
        out[key] = float(np.mean(vals)) if vals else None
    return out


def train(config, bundle, on_epoch=None):
    """Train a fresh model; returns (model restored to best validation epoch, MetricsReport)."""
    start = time.perf_counter()
    model = ArgfModel(config, bundle.dim, bundle.num_classes)
    trainer = StageTrainer(
        model.stage, lr=config.lr_embed, lam=config.lam,
        no_adv=config.no_adv, no_decoder=config.no_decoder, no_classifier=config.no_classifier,
    )
    opt = Adam(fusion_params(model), lr=config.lr_gfn)
    report = MetricsReport(config=config.to_dict(), seed=config.seed)
    has_val = len(bundle.indices("val")) > 0

    best_state, best_acc, since_best = model.state_dict(), -1.0, 0
    try:
        for epoch in range(config.epochs):
            records = []
            for batch in batches(bundle, "train", config.batch_size, seed=(config.seed, epoch)):
                losses = trainer.train_step(batch).to_dict()
                losses["mse"] = fusion_step(model, opt, batch)
                records.append(losses)
            entry = {"epoch": epoch, **_epoch_means(records)}
            entry["val_accuracy"] = split_metrics(model, bundle, "val").accuracy if has_val else None
            report.history.append(entry)

            score = entry["val_accuracy"] if has_val else -entry["mse"]
            if score > best_acc:
                best_acc, since_best = score, 0
                best_state, report.best_epoch = model.state_dict(), epoch
            else:
                since_best += 1
            if on_epoch is not None:
                on_epoch(epoch, model, entry)
            if since_best >= config.patience:
                report.stopped_early = True
                break
    except DivergenceError as exc:
        model.load_state_dict(best_state)
        report.wall_clock_s = time.perf_counter() - start
        raise TrainingDiverged(str(exc), model, report) from exc

    model.load_state_dict(best_state)
    if has_val:
        report.val = split_metrics(model, bundle, "val")
    report.test = split_metrics(model, bundle, "test")
    report.wall_clock_s = time.perf_counter() - start
    return model, report


# -- grid search, ablations, comparisons ------------------------------------------------


def expand_grid(base, grid):
    keys = sorted(grid)
    for values in itertools.product(*(grid[k] for k in keys)):
        yield replace(base, **dict(zip(keys, values)))


def _train_point(args):
    config, bundle = args
    _, report = train(config, bundle)
    return report


def _rank_key(config, report):
    val = report.val.accuracy if report.val is not None else -1.0
    return (-val, json.dumps(config.to_dict(), sort_keys=True))


def grid_search(base, grid, bundle, workers=1):
    """Train every grid point; ranked best-first by validation accuracy.

    Only the top entry keeps its test metrics.
    """
    configs = list(expand_grid(base, grid))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            reports = list(pool.map(_train_point, [(c, bundle) for c in configs]))
    else:
        reports = [_train_point((c, bundle)) for c in configs]
    ranked = sorted(zip(configs, reports), key=lambda cr: _rank_key(*cr))
    for _, report in ranked[1:]:
        report.test = None
    return ranked


def ablation_configs(base):
    rows = {"full": replace(base, no_adv=False, no_decoder=False, no_classifier=False)}
    for name in ABLATIONS[1:]:
        rows[name] = replace(rows["full"], **{name: True})
    return rows


def run_rows(configs, bundle):
    out = {}
    for name, config in configs.items():
        log.info("training row %s", name)
        out[name] = train(config, bundle)[1]
    return out


def ablate(base, bundle):
    return run_rows(ablation_configs(base), bundle)


def compare(base, bundle):
    return run_rows({kind: replace(base, fusion=kind) for kind in FUSION_KINDS}, bundle)


def format_table(rows, title):
    lines = [title, f"{'row':<16}{'test acc':>10}{'avg F1':>10}{'val acc':>10}{'best ep':>9}"]
    for name, r in rows.items():
        val = "-" if r.val is None else f"{r.val.accuracy:.4f}"
        test_acc = "-" if r.test is None else f"{r.test.accuracy:.4f}"
        test_f1 = "-" if r.test is None else f"{r.test.avg_f1:.4f}"
        best = "-" if r.best_epoch is None else str(r.best_epoch)
        lines.append(f"{name:<16}{test_acc:>10}{test_f1:>10}{val:>10}{best:>9}")
    return "\n".join(lines)


# -- exports ---------------------------------------------------------------------------


def _write_rows(path, rows):
    with open(path, "w") as f:
        for row in rows:
            f.write(",".join(repr(float(v)) if not isinstance(v, (int, np.integer)) else str(int(v)) for v in row))
            f.write("\n")


def export_embeddings(model, bundle, path, split="all"):
    """One row per sample: a, v, l embeddings concatenated (3k floats) then the integer label."""
    idx = bundle.indices(split)
    batch = make_batch(bundle, idx)
    emb = model.embed(batch.x, detach=True)
    values = np.concatenate([emb[m].values for m in MODALITIES], axis=1)
    _write_rows(path, ([*row, int(y)] for row, y in zip(values, batch.labels)))
    return values, batch.labels


def export_graph_weights(model, bundle, path, split="test"):
    """One row per sample with the 12 GFN vertex weights in VERTEX_ORDER."""
    batch = make_batch(bundle, bundle.indices(split))
    weights = model.graph(batch.x).vertex_weights()
    _write_rows(path, weights)
    return weights



# -- modality gap ----------------------------------------------------------------------


def stage_gap(model, bundle, split="test"):
    """|mean D(source) - mean D(target)| under the stage's own discriminator."""
    batch = make_batch(bundle, bundle.indices(split))
    emb = model.embed(batch.x, detach=True)
    stage = model.stage
    src = np.mean([stage.discriminate(emb[m]).values.mean() for m in stage.sources])
    return float(abs(src - stage.discriminate(emb[stage.target]).values.mean()))


@dataclass
class GapResult:
    initial: float  # untrained model
    final: float  # stage state after the last training epoch
    restored: float  # best-validation checkpoint that train() returns
    report: MetricsReport
    model: ArgfModel = field(repr=False, default=None)

    @property
    def shrank(self):
        return self.final < self.initial


def gap_run(config, bundle, split="test"):
    """Train once and measure the stage discriminator gap before and after.

    ``final`` is taken on the embedding stage as the last epoch leaves it, before the
    best-validation checkpoint is restored.
    """
    initial = stage_gap(ArgfModel(config, bundle.dim, bundle.num_classes), bundle, split)
    last = {}

    def measure(epoch, model, entry):
        last["gap"] = stage_gap(model, bundle, split)

    model, report = train(config, bundle, on_epoch=measure)
    restored = stage_gap(model, bundle, split)
    return GapResult(initial, last.get("gap", initial), restored, report, model)


def probe_gap(model, bundle, fit_split="train", eval_split="test", steps=300, lr=1e-2, seed=0):
    """Same gap, measured by a fresh discriminator fitted to the frozen embeddings.

    The probe shares the stage discriminator's architecture and is trained on the
    true/fake objective (target -> 1, sources -> 0) with unit weight.
    """
    stage = model.stage
    k = stage.k
    rng = np.random.default_rng(seed)
    probe = Sequential(DenseLayer(k, k, "leaky_relu", rng), DenseLayer(k, 1, "sigmoid", rng))
    fit = model.embed(make_batch(bundle, bundle.indices(fit_split)).x, detach=True)
    ev = model.embed(make_batch(bundle, bundle.indices(eval_split)).x, detach=True)
    opt = Adam(probe.parameters(), lr=lr)
    s1, s2 = stage.sources
    for _ in range(steps):
        def logp(p):
            return p.clip(1e-7, 1 - 1e-7).log()
        loss = -(
            logp(1.0 - probe(fit[s1])).mean()
            + logp(1.0 - probe(fit[s2])).mean()
            + 2.0 * logp(probe(fit[stage.target])).mean()
        )
        loss.backward()
        opt.step()
    src = np.mean([probe(ev[m]).values.mean() for m in stage.sources])
    return float(abs(src - probe(ev[stage.target]).values.mean()))
