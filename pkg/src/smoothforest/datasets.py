"""Synthetic classification problems, CSV tables, splits and minibatches."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import expit
from scipy.stats import special_ortho_group

SYNTHETIC_KINDS = (
    "identity_line",
    "xor_quadrants",
    "concentric_circles",
    "two_spirals",
    "gaussian_blobs",
    "rotated_embeddings",
)


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    feature_names: list = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=float)
        self.labels = np.asarray(self.labels)
        if self.features.ndim != 2:
            raise ValueError(f"features must be a 2D array, got shape {self.features.shape}")
        if self.labels.shape[0] != self.features.shape[0]:
            raise ValueError(
                f"{self.features.shape[0]} feature rows but {self.labels.shape[0]} labels"
            )
        if not np.all(np.isfinite(self.features)):
            raise ValueError("features must be finite")

    def __len__(self):
        return self.features.shape[0]

    @property
    def n_features(self):
        return self.features.shape[1]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.features[idx], self.labels[idx], self.feature_names)


@dataclass
class SyntheticSpec:
    kind: str = "identity_line"
    n: int = 5000
    noise: float = 0.0
    seed: int = 0
    n_classes: int = 3  # gaussian_blobs only
    dim: int = 4  # rotated_embeddings only

    def __post_init__(self):
        if self.kind not in SYNTHETIC_KINDS:
            raise ValueError(f"unknown dataset kind {self.kind!r}; expected one of {SYNTHETIC_KINDS}")
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if not 0.0 <= self.noise <= 1.0:
            raise ValueError("noise is a label-flip probability in [0, 1]")
        if self.dim < 2:
            raise ValueError("dim must be >= 2")


def _spirals(rng, n):
    labels = rng.integers(0, 2, size=n)
    t = np.sqrt(rng.random(n)) * 3.0 * math.pi  # about 1.5 turns
    radius = t / (3.0 * math.pi) * 0.45
    angle = t + math.pi * labels
    x = 0.5 + radius * np.cos(angle)
    y = 0.5 + radius * np.sin(angle)
    return np.column_stack([x, y]), labels


def _blobs(rng, n, k):
    angles = 2.0 * math.pi * np.arange(k) / k
    centers = 0.5 + 0.3 * np.column_stack([np.cos(angles), np.sin(angles)])
    labels = rng.integers(0, k, size=n)
    X = centers[labels] + rng.normal(scale=0.07, size=(n, 2))
    return np.clip(X, 0.0, 1.0), labels


def _rotated_embeddings(rng, n, dim):
    # Stand-in for a pre-trained encoder: the label is linear in latent
    # Gaussian factors, which are rotated and squashed into (0, 1), so the
    # class boundary is oblique and slightly curved in embedding space.
    latent = rng.standard_normal((n, dim))
    labels = (latent[:, 0] + latent[:, 1] > 0).astype(int)
    rotation = special_ortho_group.rvs(dim, random_state=rng)
    return expit(latent @ rotation.T), labels


_RULE_KINDS = ("identity_line", "xor_quadrants", "concentric_circles")


def pattern_labels(kind, X) -> np.ndarray:
    """Noise-free labels of points in [0, 1]^2 for the rule-based kinds."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if kind == "identity_line":
        return (X[:, 0] > X[:, 1]).astype(int)
    if kind == "xor_quadrants":
        return ((X[:, 0] > 0.5) ^ (X[:, 1] > 0.5)).astype(int)
    if kind == "concentric_circles":
        r = np.hypot(X[:, 0] - 0.5, X[:, 1] - 0.5)
        # inner disc covers half of the unit square
        return (r < math.sqrt(0.5 / math.pi)).astype(int)
    raise ValueError(f"{kind!r} has no closed-form labeling rule; use one of {_RULE_KINDS}")


def generate(spec: SyntheticSpec) -> Dataset:
    """Points labeled by the pattern named in ``spec.kind``.

    All kinds except ``rotated_embeddings`` are 2D points in [0, 1]^2;
    that one produces ``spec.dim`` columns in (0, 1).

    ``noise`` is the probability that a label is replaced by a uniformly
    drawn different class.
    """
    rng = np.random.default_rng(spec.seed)
    n = spec.n
    n_classes = 2
    if spec.kind in _RULE_KINDS:
        X = rng.random((n, 2))
        y = pattern_labels(spec.kind, X)
    elif spec.kind == "two_spirals":
        X, y = _spirals(rng, n)
    elif spec.kind == "rotated_embeddings":
        X, y = _rotated_embeddings(rng, n, spec.dim)
    else:
        n_classes = spec.n_classes
        X, y = _blobs(rng, n, n_classes)
    if spec.noise > 0:
        flip = rng.random(n) < spec.noise
        shift = rng.integers(1, n_classes, size=n)
        y = np.where(flip, (y + shift) % n_classes, y)
    names = [f"x{i + 1}" for i in range(X.shape[1])]
    return Dataset(X, y.astype(int), names)


def write_csv(dataset: Dataset, path, label_name="label"):
    """Feature columns followed by the label column, with a header row."""
    names = dataset.feature_names or [f"x{i + 1}" for i in range(dataset.n_features)]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(list(names) + [label_name])
        for row, label in zip(dataset.features, dataset.labels):
            writer.writerow([repr(float(v)) for v in row] + [_label_text(label)])


def _label_text(label):
    label = label.item() if hasattr(label, "item") else label
    if isinstance(label, float):
        return str(int(label)) if label.is_integer() else repr(label)
    return str(label)


class CSVFormatError(ValueError):
    pass


def _resolve_column(spec, header, width):
    if isinstance(spec, int):
        idx = spec if spec >= 0 else width + spec
    elif header is not None and spec in header:
        idx = header.index(spec)
    else:
        raise CSVFormatError(f"unknown column {spec!r}")
    if not 0 <= idx < width:
        raise CSVFormatError(f"column index {spec!r} out of range for {width} columns")
    return idx


def load_csv(path, label_column=-1, feature_columns=None, header=True) -> Dataset:
    """Read a numeric table. Row and column numbers in errors are 1-based file positions.

    ``label_column`` and ``feature_columns`` accept header names or integer
    indices; by default the last column is the label and all others are
    features.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such data file: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        rows = [r for r in csv.reader(fh)]
    names = None
    start = 0
    if header:
        if not rows:
            raise CSVFormatError(f"{path}: empty file")
        names = [c.strip() for c in rows[0]]
        start = 1
    body = rows[start:]
    if not body:
        raise CSVFormatError(f"{path}: no data rows")
    width = len(names) if names is not None else len(body[0])
    label_idx = _resolve_column(label_column, names, width)
    if feature_columns is None:
        feat_idx = [i for i in range(width) if i != label_idx]
    else:
        feat_idx = [_resolve_column(c, names, width) for c in feature_columns]
    features = np.empty((len(body), len(feat_idx)))
    labels = np.empty(len(body))
    for r, row in enumerate(body):
        line = r + start + 1
        if len(row) != width:
            raise CSVFormatError(f"{path}: row {line} has {len(row)} fields, expected {width}")
        for j, c in enumerate(feat_idx):
            features[r, j] = _parse_cell(row[c], path, line, c + 1)
        labels[r] = _parse_cell(row[label_idx], path, line, label_idx + 1)
    if np.all(labels == np.round(labels)):
        labels = labels.astype(int)
    feature_names = [names[i] for i in feat_idx] if names is not None else None
    return Dataset(features, labels, feature_names)


def _parse_cell(text, path, row, col):
    try:
        value = float(text)
    except ValueError:
        raise CSVFormatError(
            f"{path}: non-numeric value {text!r} at row {row}, column {col}"
        ) from None
    if not math.isfinite(value):
        raise CSVFormatError(f"{path}: non-finite value {text!r} at row {row}, column {col}")
    return value


def split(dataset: Dataset, fractions=(0.8, 0.1, 0.1), seed=0) -> list:
    """Seeded shuffle partition into ``len(fractions)`` non-empty parts."""
    fractions = np.asarray(fractions, dtype=float)
    if np.any(fractions <= 0) or not math.isclose(fractions.sum(), 1.0, abs_tol=1e-9):
        raise ValueError("fractions must be positive and sum to 1")
    n, k = len(dataset), len(fractions)
    if n < k:
        raise ValueError(f"cannot split {n} examples into {k} non-empty parts")
    exact = n * fractions
    sizes = np.floor(exact).astype(int)
    order = np.argsort(-(exact - sizes), kind="stable")
    sizes[order[: n - sizes.sum()]] += 1
    while np.any(sizes == 0):
        sizes[np.argmax(sizes)] -= 1
        sizes[np.argmin(sizes)] += 1
    perm = np.random.default_rng(seed).permutation(n)
    bounds = np.cumsum(sizes)[:-1]
    return [dataset.subset(np.sort(idx)) for idx in np.split(perm, bounds)]


def batches(dataset, batch_size, seed=0, epoch=0) -> list:
    """Index arrays covering ``range(len(dataset))`` once, shuffled per epoch.

    ``dataset`` may be a :class:`Dataset` or an example count.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    n = dataset if isinstance(dataset, (int, np.integer)) else len(dataset)
    perm = np.random.default_rng([seed, epoch]).permutation(n)
    return [perm[i:i + batch_size] for i in range(0, n, batch_size)]
