"""Feature bundles: synthetic generation, on-disk format, splits and minibatches.

Bundle directory layout::

    manifest.json   {"modalities": [{"name": "a", "dim": 16}, ...], "num_classes": 2, "count": 2000}
    a.csv v.csv l.csv   count rows x dim floats, no header
    labels.csv      count integer rows
    splits.csv      optional, rows "index,train|val|test"
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MODALITIES = ("a", "v", "l")
SPLITS = ("train", "val", "test")
DEFAULT_FRACTIONS = (0.7, 0.1, 0.2)


class BundleError(ValueError):
    pass


@dataclass(frozen=True)
class FeatureBundle:
    features: dict  # modality -> (count, dim) float64
    labels: np.ndarray  # (count,) int
    num_classes: int
    split: np.ndarray  # (count,) strings from SPLITS

    def __post_init__(self):
        validate(self)

    @property
    def count(self):
        return len(self.labels)

    @property
    def dim(self):
        return self.features[MODALITIES[0]].shape[1]

    def indices(self, split):
        if split == "all":
            return np.arange(self.count)
        if split not in SPLITS:
            raise ValueError(f"unknown split {split!r}")
        return np.flatnonzero(self.split == split)

    def subset(self, idx):
        return {m: self.features[m][idx] for m in MODALITIES}, self.labels[idx]


def validate(bundle):
    if set(bundle.features) != set(MODALITIES):
        raise BundleError(f"bundle needs modalities {MODALITIES}, got {sorted(bundle.features)}")
    count = len(bundle.labels)
    dims = {}
    for m in MODALITIES:
        x = bundle.features[m]
        if x.ndim != 2 or x.shape[0] != count:
            raise BundleError(f"modality {m!r}: expected {count} rows, got shape {x.shape}")
        if not np.all(np.isfinite(x)):
            raise BundleError(f"modality {m!r}: non-finite feature values")
        dims[m] = x.shape[1]
    if len(set(dims.values())) != 1:
        raise BundleError(f"all modalities must share one feature dim, got {dims}")
    if bundle.num_classes < 2:
        raise BundleError(f"num_classes must be >= 2, got {bundle.num_classes}")
    bad = (bundle.labels < 0) | (bundle.labels >= bundle.num_classes)
    if np.any(bad):
        raise BundleError(
            f"label {int(bundle.labels[bad][0])} out of range [0, {bundle.num_classes})"
        )
    if len(bundle.split) != count:
        raise BundleError(f"split assignment covers {len(bundle.split)} samples, expected {count}")
    unknown = set(np.unique(bundle.split)) - set(SPLITS)
    if unknown:
        raise BundleError(f"unknown split names {sorted(unknown)}")


def random_split(count, seed, fractions=DEFAULT_FRACTIONS):
    rng = np.random.default_rng(seed)
    order = rng.permutation(count)
    n_train = int(round(fractions[0] * count))
    n_val = int(round(fractions[1] * count))
    split = np.empty(count, dtype=object)
    split[order[:n_train]] = "train"
    split[order[n_train : n_train + n_val]] = "val"
    split[order[n_train + n_val :]] = "test"
    return split.astype(str)


# -- synthetic data -------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticSpec:
    num_classes: int = 2
    dim: int = 16
    separation: float = 1.0
    noise: tuple = (1.0, 1.0, 1.0)  # per modality, order a, v, l
    redundancy: float = 0.5
    count: int = 2000
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.dim < 1 or self.count < 1:
            raise ValueError("dim and count must be positive")
        if not self.separation > 0:
            raise ValueError("separation must be > 0")
        if len(self.noise) != len(MODALITIES) or any(not s > 0 for s in self.noise):
            raise ValueError("noise needs three positive entries (a, v, l)")
        if not 0.0 <= self.redundancy <= 1.0:
            raise ValueError("redundancy must lie in [0, 1]")


def _construction(spec):
    rng = np.random.default_rng(spec.seed)
    d, n = spec.dim, spec.num_classes
    shared = spec.separation * rng.standard_normal((n, d))
    means = {}
    for m in MODALITIES:
        # orthogonal projections keep class-mean distances independent of the modality
        A = np.linalg.qr(rng.standard_normal((d, d)))[0]
        B = np.linalg.qr(rng.standard_normal((d, d)))[0]
        private = spec.separation * rng.standard_normal((n, d))
        means[m] = spec.redundancy * shared @ A.T + (1 - spec.redundancy) * private @ B.T
    return rng, means


def synthetic_class_means(spec):
    """Noise-free class means per modality, shape (num_classes, dim)."""
    return _construction(spec)[1]


def generate_synthetic(spec, split_seed=None):
    rng, means = _construction(spec)
    labels = np.arange(spec.count) % spec.num_classes
    labels = rng.permutation(labels)
    features = {}
    for m, sigma in zip(MODALITIES, spec.noise):
        features[m] = means[m][labels] + sigma * rng.standard_normal((spec.count, spec.dim))
    split = random_split(spec.count, spec.seed if split_seed is None else split_seed)
    return FeatureBundle(features, labels.astype(np.int64), spec.num_classes, split)


def nearest_mean_accuracy(bundle, fit_split="train", eval_split="test"):
    """Accuracy of a nearest-class-mean rule on the concatenated modalities."""
    x = np.concatenate([bundle.features[m] for m in MODALITIES], axis=1)
    fit, ev = bundle.indices(fit_split), bundle.indices(eval_split)
    centres = np.stack(
        [x[fit][bundle.labels[fit] == c].mean(axis=0) for c in range(bundle.num_classes)]
    )
    dist = ((x[ev][:, None, :] - centres[None]) ** 2).sum(axis=-1)
    return float(np.mean(dist.argmin(axis=1) == bundle.labels[ev]))


# -- disk format --------------------------------------------------------------------


def save_bundle(bundle, path):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    manifest = {
        "modalities": [{"name": m, "dim": int(bundle.features[m].shape[1])} for m in MODALITIES],
        "num_classes": int(bundle.num_classes),
        "count": int(bundle.count),
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    for m in MODALITIES:
        with open(path / f"{m}.csv", "w", newline="") as f:
            writer = csv.writer(f)
            for row in bundle.features[m]:
                writer.writerow([repr(float(v)) for v in row])
    with open(path / "labels.csv", "w") as f:
        f.writelines(f"{int(y)}\n" for y in bundle.labels)
    with open(path / "splits.csv", "w") as f:
        f.writelines(f"{i},{s}\n" for i, s in enumerate(bundle.split))
    return path


def _read_rows(file):
    try:
        with open(file, newline="") as f:
            return [row for row in csv.reader(f) if row]
    except (csv.Error, UnicodeDecodeError) as exc:
        raise BundleError(f"{file.name}: unreadable ({exc})") from None


def _read_matrix(file, count, dim):
    rows = _read_rows(file)
    if len(rows) != count:
        raise BundleError(f"{file.name}: expected {count} rows, found {len(rows)}")
    out = np.empty((count, dim))
    for i, row in enumerate(rows):
        if len(row) != dim:
            raise BundleError(f"{file.name}: row {i} has {len(row)} values, expected {dim}")
        try:
            out[i] = [float(v) for v in row]
        except ValueError as exc:
            raise BundleError(f"{file.name}: row {i} is not numeric ({exc})") from None
    return out


def load_bundle(path, seed=0):
    path = Path(path)
    manifest_file = path / "manifest.json"
    if not manifest_file.exists():
        raise BundleError(f"{manifest_file} not found")
    try:
        manifest = json.loads(manifest_file.read_text())
        mods = manifest["modalities"]
        num_classes = int(manifest["num_classes"])
        count = int(manifest["count"])
        dims = {str(m["name"]): int(m["dim"]) for m in mods}
    except (ValueError, KeyError, TypeError) as exc:
        raise BundleError(f"manifest.json is malformed: {exc!r}") from None
    if set(dims) != set(MODALITIES) or len(mods) != len(MODALITIES):
        raise BundleError(f"manifest must list modalities {MODALITIES}, got {[m.get('name') for m in mods]}")
    if len(set(dims.values())) != 1:
        raise BundleError(f"manifest modality dims differ: {dims}")
    if count < 1:
        raise BundleError(f"manifest count must be positive, got {count}")

    features = {}
    for m in MODALITIES:
        file = path / f"{m}.csv"
        if not file.exists():
            raise BundleError(f"{file.name} not found")
        features[m] = _read_matrix(file, count, dims[m])

    label_file = path / "labels.csv"
    if not label_file.exists():
        raise BundleError("labels.csv not found")
    label_rows = _read_rows(label_file)
    if len(label_rows) != count:
        raise BundleError(f"labels.csv: expected {count} rows, found {len(label_rows)}")
    labels = np.empty(count, dtype=np.int64)
    for i, row in enumerate(label_rows):
        try:
            if len(row) != 1:
                raise ValueError(row)
            labels[i] = int(row[0])
        except ValueError:
            raise BundleError(f"labels.csv: row {i} is not a single integer: {row}") from None
    bad = (labels < 0) | (labels >= num_classes)
    if np.any(bad):
        i = int(np.flatnonzero(bad)[0])
        raise BundleError(f"labels.csv: row {i} label {labels[i]} out of range [0, {num_classes})")

    split_file = path / "splits.csv"
    if split_file.exists():
        split = np.empty(count, dtype=object)
        for row in _read_rows(split_file):
            try:
                idx, name = int(row[0]), row[1].strip()
            except (ValueError, IndexError):
                raise BundleError(f"splits.csv: malformed row {row}") from None
            if len(row) != 2 or not 0 <= idx < count or name not in SPLITS:
                raise BundleError(f"splits.csv: bad row {row}")
            if split[idx] is not None:
                raise BundleError(f"splits.csv: index {idx} assigned twice")
            split[idx] = name
        missing = [i for i in range(count) if split[i] is None]
        if missing:
            raise BundleError(f"splits.csv: {len(missing)} samples unassigned (first {missing[0]})")
        split = split.astype(str)
    else:
        split = random_split(count, seed)
    return FeatureBundle(features, labels, num_classes, split)


# -- batching ---------------------------------------------------------------------


@dataclass
class ModalityBatch:
    x: dict
    y: np.ndarray  # one-hot (batch, N)
    labels: np.ndarray
    index: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))

    def __len__(self):
        return len(self.labels)


def one_hot(labels, num_classes):
    out = np.zeros((len(labels), num_classes))
    out[np.arange(len(labels)), labels] = 1.0
    return out


def make_batch(bundle, idx):
    x, labels = bundle.subset(idx)
    return ModalityBatch(x, one_hot(labels, bundle.num_classes), labels, np.asarray(idx))


def batches(bundle, split, batch_size, seed=None):
    """Minibatches over one split; shuffled by ``seed`` (None keeps index order)."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    idx = bundle.indices(split)
    if seed is not None:
        idx = np.random.default_rng(seed).permutation(idx)
    return [make_batch(bundle, idx[i : i + batch_size]) for i in range(0, len(idx), batch_size)]
