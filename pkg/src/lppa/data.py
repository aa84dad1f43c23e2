"""Datasets, CSV ingestion and client partitioning."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import IngestionError, ParameterError, PartitionError
from .numerics import SeededRng

PARTITION_KINDS = ("iid", "quantity_skew", "label_skew_dirichlet", "label_skew_count")
MAX_PARTITION_ATTEMPTS = 100


@dataclass(frozen=True, eq=False)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    n_classes: int
    # positions of these rows in the dataset they were cut from
    indices: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        x = np.asarray(self.features, dtype=np.float64)
        y = np.asarray(self.labels)
        if x.ndim != 2 or y.ndim != 1 or x.shape[0] != y.shape[0]:
            raise ParameterError(f"features {x.shape} and labels {y.shape} disagree")
        if x.shape[0] < 1:
            raise ParameterError("dataset must hold at least one sample")
        if not np.all(np.isfinite(x)):
            raise ParameterError("features must be finite")
        if not np.issubdtype(y.dtype, np.integer):
            if not np.all(np.equal(np.mod(y, 1), 0)):
                raise ParameterError("labels must be integers")
            y = y.astype(np.int64)
        if y.min() < 0 or y.max() >= self.n_classes:
            raise ParameterError(f"labels must lie in [0, {self.n_classes})")
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y.astype(np.int64))

    def __len__(self):
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        base = self.indices if self.indices is not None else np.arange(len(self))
        return Dataset(self.features[idx], self.labels[idx], self.n_classes, base[idx])

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.n_classes == other.n_classes
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.labels, other.labels)
        )


def _class_directions(n_classes: int, dim: int, rng: SeededRng) -> np.ndarray:
    if n_classes <= dim:
        return np.eye(dim)[:n_classes]
    u = rng.normal((n_classes, dim))
    return u / np.linalg.norm(u, axis=1, keepdims=True)


def generate_synthetic(
    n_classes: int, dim: int, n_samples: int, separation: float, seed: int
) -> Dataset:
    """Gaussian blobs with unit covariance centred at ``separation * u_c``.

    The class directions ``u_c`` are coordinate axes when ``n_classes <= dim``
    and random unit vectors otherwise.  Labels are balanced up to rounding
    and rows come out shuffled.
    """
    if n_classes < 2 or dim < 1 or n_samples < n_classes:
        raise ParameterError(
            f"need n_classes >= 2, dim >= 1, n_samples >= n_classes; "
            f"got {n_classes}, {dim}, {n_samples}"
        )
    rng = SeededRng.for_purpose(seed, "synthetic")
    centers = separation * _class_directions(n_classes, dim, rng)
    labels = np.arange(n_samples) % n_classes
    labels = labels[rng.permutation(n_samples)]
    features = centers[labels] + rng.normal((n_samples, dim))
    return Dataset(features, labels, n_classes)


def minmax_normalize(features: np.ndarray) -> np.ndarray:
    """Scale each column to [0, 1]; constant columns map to 0."""
    x = np.asarray(features, dtype=np.float64)
    lo = x.min(axis=0)
    span = x.max(axis=0) - lo
    out = np.zeros_like(x)
    nz = span > 0
    out[:, nz] = (x[:, nz] - lo[nz]) / span[nz]
    return out


def normalized(d: Dataset) -> Dataset:
    return Dataset(minmax_normalize(d.features), d.labels, d.n_classes, d.indices)


def train_test_split(d: Dataset, test_fraction: float, seed: int):
    if not 0 < test_fraction < 1:
        raise ParameterError(f"test_fraction must be in (0, 1), got {test_fraction}")
    n_test = int(round(test_fraction * len(d)))
    if n_test < 1 or n_test >= len(d):
        raise ParameterError("split leaves an empty train or test set")
    perm = SeededRng.for_purpose(seed, "split").permutation(len(d))
    train = d.subset(np.sort(perm[n_test:]))
    test = d.subset(np.sort(perm[:n_test]))
    # shards index into the train set, not the original dataset
    return Dataset(train.features, train.labels, d.n_classes), test


def load_csv(path, label_column: str, n_classes: int | None = None) -> Dataset:
    """Load a headed CSV; every column but ``label_column`` is a feature.

    Features are min-max normalised per column.  Errors carry the 1-based
    data row index (header excluded).
    """
    path = Path(path)
    try:
        fh = path.open(newline="", encoding="utf-8")
    except OSError as exc:
        raise IngestionError(f"cannot open {path}: {exc}") from exc
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise IngestionError(f"{path} is empty") from None
        except csv.Error as exc:
            raise IngestionError(str(exc), row=0) from exc
        header = [h.strip() for h in header]
        if label_column not in header:
            raise IngestionError(f"label column {label_column!r} not in header {header}")
        li = header.index(label_column)
        rows, labels = [], []
        try:
            for r, rec in enumerate(reader, start=1):
                if not rec:
                    continue
                if len(rec) != len(header):
                    raise IngestionError(
                        f"expected {len(header)} fields, found {len(rec)}", row=r
                    )
                try:
                    values = [float(v) for k, v in enumerate(rec) if k != li]
                except ValueError as exc:
                    raise IngestionError(f"non-numeric cell ({exc})", row=r) from None
                try:
                    lab = float(rec[li])
                except ValueError:
                    raise IngestionError(f"non-numeric label {rec[li]!r}", row=r) from None
                if lab != int(lab) or lab < 0:
                    raise IngestionError(f"label {rec[li]!r} is not a class index", row=r)
                if not all(np.isfinite(values)):
                    raise IngestionError("non-finite feature value", row=r)
                rows.append(values)
                labels.append(int(lab))
        except csv.Error as exc:
            raise IngestionError(str(exc), row=reader.line_num) from exc
    if not rows:
        raise IngestionError(f"{path} has no data rows")
    features = np.array(rows, dtype=np.float64).reshape(len(rows), len(header) - 1)
    y = np.array(labels, dtype=np.int64)
    k = int(y.max()) + 1 if n_classes is None else int(n_classes)
    if k < 2:
        k = 2
    return Dataset(minmax_normalize(features), y, k)


def save_csv(d: Dataset, path, label_column: str = "label") -> None:
    """Write ``d`` with 17 significant digits so a reload is lossless."""
    names = [f"x{k}" for k in range(d.dim)] + [label_column]
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(names)
        for row, lab in zip(d.features, d.labels):
            w.writerow([f"{v:.17g}" for v in row] + [int(lab)])


@dataclass(frozen=True)
class PartitionSpec:
    kind: str = "iid"
    alpha: float = 0.1
    k: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.kind not in PARTITION_KINDS:
            raise ParameterError(f"unknown partition kind {self.kind!r}")
        if self.kind in ("quantity_skew", "label_skew_dirichlet") and not self.alpha > 0:
            raise ParameterError("Dirichlet alpha must be positive")
        if self.kind == "label_skew_count" and self.k < 1:
            raise ParameterError("label count k must be >= 1")


def _sizes_from_proportions(p: np.ndarray, total: int) -> np.ndarray:
    raw = p * total
    sizes = np.floor(raw).astype(np.int64)
    short = total - sizes.sum()
    if short:
        order = np.argsort(-(raw - sizes), kind="stable")
        sizes[order[:short]] += 1
    return sizes


def _split_by_sizes(idx: np.ndarray, sizes) -> list:
    return np.split(idx, np.cumsum(sizes)[:-1])


def partition(d: Dataset, spec: PartitionSpec, n_clients: int) -> list:
    """Split ``d`` into ``n_clients`` disjoint, covering, non-empty shards."""
    n_clients = int(n_clients)
    if n_clients < 2:
        raise ParameterError(f"need at least 2 clients, got {n_clients}")
    if len(d) < n_clients:
        raise PartitionError(f"{len(d)} samples cannot fill {n_clients} shards")
    rng = SeededRng.for_purpose(spec.seed, "partition", PARTITION_KINDS.index(spec.kind))

    if spec.kind == "label_skew_count":
        parts = _label_count_parts(d, spec.k, n_clients, rng)
        if any(len(p) == 0 for p in parts):
            raise PartitionError("label_skew_count left a client without samples")
        return [d.subset(np.sort(p)) for p in parts]

    for _ in range(MAX_PARTITION_ATTEMPTS):
        if spec.kind == "iid":
            parts = np.array_split(rng.permutation(len(d)), n_clients)
        elif spec.kind == "quantity_skew":
            p = rng.dirichlet(np.full(n_clients, spec.alpha))
            parts = _split_by_sizes(rng.permutation(len(d)), _sizes_from_proportions(p, len(d)))
        else:
            buckets = [[] for _ in range(n_clients)]
            for c in range(d.n_classes):
                idx = np.flatnonzero(d.labels == c)
                if idx.size == 0:
                    continue
                idx = idx[rng.permutation(idx.size)]
                p = rng.dirichlet(np.full(n_clients, spec.alpha))
                for b, chunk in zip(buckets, _split_by_sizes(idx, _sizes_from_proportions(p, idx.size))):
                    b.extend(chunk.tolist())
            parts = [np.array(b, dtype=np.int64) for b in buckets]
        if all(len(p) > 0 for p in parts):
            return [d.subset(np.sort(p)) for p in parts]
    raise PartitionError(
        f"{spec.kind} partition left a client empty after {MAX_PARTITION_ATTEMPTS} attempts"
    )


def label_assignment(n_classes: int, k: int, n_clients: int) -> list:
    """Round-robin label sets: client ``i`` holds ``(i*k + j) mod C`` for ``j < k``."""
    k = min(k, n_classes)
    return [sorted({(i * k + j) % n_classes for j in range(k)}) for i in range(n_clients)]


def _label_count_parts(d: Dataset, k: int, n_clients: int, rng: SeededRng):
    sets = label_assignment(d.n_classes, k, n_clients)
    present = set(np.unique(d.labels).tolist())
    covered = set().union(*sets)
    if not present <= covered:
        raise PartitionError(
            f"{n_clients} clients with {k} labels each cannot cover classes "
            f"{sorted(present - covered)}"
        )
    buckets = [[] for _ in range(n_clients)]
    for c in sorted(present):
        holders = [i for i, s in enumerate(sets) if c in s]
        idx = np.flatnonzero(d.labels == c)
        idx = idx[rng.permutation(idx.size)]
        for h, chunk in zip(holders, np.array_split(idx, len(holders))):
            buckets[h].extend(chunk.tolist())
    return [np.array(b, dtype=np.int64) for b in buckets]
