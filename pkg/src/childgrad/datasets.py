"""Synthetic generators, CSV ingestion, splits, shifts, and subsampling."""

from __future__ import annotations

import csv as csv_module
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError

# fixed tags for deriving independent rng streams from one run seed
TAG_DATA = 101
TAG_ORDER = 102
TAG_MASK = 103
TAG_PROBE = 104
TAG_SUBSAMPLE = 105
TAG_SHARPNESS = 106


def seeded_rng(seed: int, *tags: int) -> np.random.Generator:
    """Independent deterministic stream for (seed, purpose tags)."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, tags)]))


@dataclass
class Dataset:
    """Feature matrix plus labels; labels are class indices or real targets."""

    features: np.ndarray
    labels: np.ndarray
    domain_tag: list | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels)
        if self.features.ndim != 2:
            raise ShapeError("features must be a 2-d matrix")
        if self.features.shape[0] != self.labels.shape[0]:
            raise ShapeError("feature and label row counts differ")
        if self.domain_tag is not None and len(self.domain_tag) != len(self.labels):
            raise ShapeError("domain_tag length mismatch")

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def input_dim(self) -> int:
        return self.features.shape[1]

    def take(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        tags = [self.domain_tag[i] for i in idx] if self.domain_tag else None
        return Dataset(self.features[idx], self.labels[idx], tags)

    def is_classification(self) -> bool:
        return np.issubdtype(self.labels.dtype, np.integer)


@dataclass
class DatasetSplits:
    train: Dataset
    eval: Dataset
    # extra evaluation sets, e.g. a domain-shifted copy under key "ood"
    extra_eval: dict = field(default_factory=dict)

    def eval_sets(self) -> dict:
        return {"eval": self.eval, **self.extra_eval}


@dataclass(frozen=True)
class DataSpec:
    """Declarative dataset description: generator name, args, split, shift."""

    generator: str
    args: dict = field(default_factory=dict)
    split: float = 0.8
    domain_shift: dict | None = None

    def __post_init__(self):
        if not 0.0 < self.split < 1.0:
            raise ConfigError("split ratio must lie in (0, 1)")

    def to_dict(self) -> dict:
        return {
            "generator": self.generator,
            "args": dict(self.args),
            "split": self.split,
            "domain_shift": dict(self.domain_shift) if self.domain_shift else None,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DataSpec":
        return cls(
            generator=d["generator"],
            args=dict(d.get("args", {})),
            split=float(d.get("split", 0.8)),
            domain_shift=d.get("domain_shift"),
        )


def _gen_two_gaussians(args, rng):
    n = int(args.get("n", 200))
    d = int(args.get("d", 2))
    separation = float(args.get("separation", 2.0))
    half = n // 2
    labels = np.concatenate([np.zeros(half, np.int64), np.ones(n - half, np.int64)])
    mean = np.zeros(d)
    mean[0] = separation / 2.0
    X = rng.standard_normal((n, d))
    X[labels == 0] -= mean
    X[labels == 1] += mean
    return X, labels


def _gen_two_moons(args, rng):
    n = int(args.get("n", 200))
    noise = float(args.get("noise", 0.2))
    # optional distractor features: pure noise columns that invite overfitting
    noise_dims = int(args.get("noise_dims", 0))
    noise_scale = float(args.get("noise_scale", 1.0))
    # optional rotation of the two real dims, for related-but-distinct tasks
    rotate_deg = float(args.get("rotate_deg", 0.0))
    half = n // 2
    t_out = np.linspace(0.0, np.pi, half)
    t_in = np.linspace(0.0, np.pi, n - half)
    outer = np.stack([np.cos(t_out), np.sin(t_out)], axis=1)
    inner = np.stack([1.0 - np.cos(t_in), 1.0 - np.sin(t_in) - 0.5], axis=1)
    X = np.concatenate([outer, inner], axis=0)
    X += noise * rng.standard_normal(X.shape)
    if rotate_deg:
        theta = np.deg2rad(rotate_deg)
        rot = np.array([[np.cos(theta), -np.sin(theta)],
                        [np.sin(theta), np.cos(theta)]])
        center = np.array([0.5, 0.25])
        X = (X - center) @ rot.T + center
    if noise_dims > 0:
        X = np.concatenate(
            [X, noise_scale * rng.standard_normal((n, noise_dims))], axis=1)
    labels = np.concatenate([np.zeros(half, np.int64), np.ones(n - half, np.int64)])
    return X, labels


def _gen_linear_regression(args, rng):
    n = int(args.get("n", 200))
    d = int(args.get("d", 3))
    noise = float(args.get("noise", 0.1))
    coef = rng.standard_normal(d)
    X = rng.standard_normal((n, d))
    y = X @ coef + noise * rng.standard_normal(n)
    return X, y


def _load_csv(args, rng):
    path = args.get("path")
    if not path:
        raise ConfigError("csv generator needs a 'path' argument")
    try:
        with open(path, newline="") as fh:
            rows = list(csv_module.reader(fh))
    except OSError as exc:
        raise ConfigError(f"cannot read CSV {path!r}: {exc}") from exc
    if len(rows) < 2:
        raise ConfigError(f"CSV {path!r} has no data rows")
    body = rows[1:]  # header row dropped
    try:
        values = np.asarray([[float(v) for v in row] for row in body])
    except ValueError as exc:
        raise ConfigError(f"malformed CSV {path!r}: {exc}") from exc
    if values.ndim != 2 or values.shape[1] < 2:
        raise ConfigError(f"CSV {path!r} needs at least one feature column")
    X, y = values[:, :-1], values[:, -1]
    if np.all(y == np.round(y)):
        y = y.astype(np.int64)
    return X, y


_GENERATORS = {
    "two_gaussians": _gen_two_gaussians,
    "two_moons": _gen_two_moons,
    "linear_regression": _gen_linear_regression,
    "csv": _load_csv,
}


def _apply_shift(features, train_features, shift: dict) -> np.ndarray:
    kind = shift.get("kind", "translate")
    amount = float(shift.get("amount", 1.0))
    shifted = features.copy()
    if kind == "translate":
        # move every feature by `amount` of its in-domain standard deviation
        scale = train_features.std(axis=0)
        scale[scale == 0.0] = 1.0
        return shifted + amount * scale
    if kind == "rotate":
        if features.shape[1] < 2:
            raise ConfigError("rotation shift needs at least 2 feature dims")
        theta = np.deg2rad(amount)
        center = train_features.mean(axis=0)[:2]
        rot = np.array([[np.cos(theta), -np.sin(theta)],
                        [np.sin(theta), np.cos(theta)]])
        shifted[:, :2] = (shifted[:, :2] - center) @ rot.T + center
        return shifted
    raise ConfigError(f"unknown domain shift kind {kind!r}")


def make_dataset(spec: DataSpec, seed: int) -> DatasetSplits:
    """Generate, shuffle, and split a dataset; deterministic in seed."""
    try:
        generate = _GENERATORS[spec.generator]
    except KeyError:
        raise ConfigError(f"unknown generator {spec.generator!r}") from None
    rng = seeded_rng(seed, TAG_DATA)
    X, y = generate(spec.args, rng)
    n = X.shape[0]
    perm = rng.permutation(n)
    X, y = X[perm], y[perm]
    n_train = int(round(spec.split * n))
    if not 0 < n_train < n:
        raise ConfigError("split leaves an empty train or eval set")
    train = Dataset(X[:n_train], y[:n_train])
    eval_set = Dataset(X[n_train:], y[n_train:])
    extra = {}
    if spec.domain_shift:
        shifted = _apply_shift(eval_set.features, train.features, spec.domain_shift)
        extra["ood"] = Dataset(shifted, eval_set.labels.copy())
    return DatasetSplits(train=train, eval=eval_set, extra_eval=extra)


def subsample(dataset: Dataset, n: int, seed: int) -> Dataset:
    """Pick n examples: stratified per class, uniform for regression."""
    if not 1 <= n <= len(dataset):
        raise ConfigError(f"subsample size {n} out of range 1..{len(dataset)}")
    rng = seeded_rng(seed, TAG_SUBSAMPLE)
    if not dataset.is_classification():
        idx = rng.choice(len(dataset), size=n, replace=False)
        return dataset.take(np.sort(idx))
    classes, counts = np.unique(dataset.labels, return_counts=True)
    # largest-remainder allocation so per-class counts total exactly n
    quotas = n * counts / len(dataset)
    alloc = np.floor(quotas).astype(np.int64)
    remainder = quotas - alloc
    short = n - int(alloc.sum())
    for j in np.argsort(-remainder, kind="stable")[:short]:
        alloc[j] += 1
    picked = []
    for cls, k in zip(classes, alloc):
        members = np.flatnonzero(dataset.labels == cls)
        if k > 0:
            picked.append(rng.choice(members, size=int(k), replace=False))
    idx = np.sort(np.concatenate(picked))
    return dataset.take(idx)
