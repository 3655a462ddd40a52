"""Datasets, class-incremental task schedules and Dirichlet client partitions."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int
    split: str = "train"

    def __post_init__(self) -> None:
        if self.features.ndim != 2 or self.labels.shape != (self.features.shape[0],):
            raise ConfigError(f"features {self.features.shape} and labels {self.labels.shape} disagree")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ConfigError(f"labels must lie in [0, {self.num_classes})")
        if not np.isfinite(self.features).all():
            raise ConfigError("feature rows must be finite")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def input_dim(self) -> int:
        return self.features.shape[1]

    def subset(self, index: np.ndarray) -> Dataset:
        index = np.asarray(index, dtype=np.int64)
        return Dataset(self.features[index], self.labels[index], self.num_classes, self.split)

    def select_classes(self, classes) -> Dataset:
        mask = np.isin(self.labels, np.fromiter(classes, dtype=np.int64))
        return self.subset(np.flatnonzero(mask))


@dataclass(frozen=True)
class TaskSchedule:
    class_sets: tuple[tuple[int, ...], ...]
    num_classes: int

    def __post_init__(self) -> None:
        seen: set[int] = set()
        for t, cs in enumerate(self.class_sets, start=1):
            if not cs:
                raise ConfigError(f"task {t} has no classes")
            overlap = seen & set(cs)
            if overlap:
                raise ConfigError(f"task {t} repeats classes {sorted(overlap)}")
            seen |= set(cs)
        if seen != set(range(self.num_classes)):
            raise ConfigError(f"tasks cover {sorted(seen)}, expected all of 0..{self.num_classes - 1}")

    @classmethod
    def contiguous(cls, num_classes: int, num_tasks: int) -> TaskSchedule:
        if not 1 <= num_tasks <= num_classes:
            raise ConfigError(f"cannot split {num_classes} classes into {num_tasks} tasks")
        chunks = np.array_split(np.arange(num_classes), num_tasks)
        return cls(tuple(tuple(int(c) for c in chunk) for chunk in chunks), num_classes)

    @property
    def num_tasks(self) -> int:
        return len(self.class_sets)

    def classes(self, t: int) -> tuple[int, ...]:
        self._check(t)
        return self.class_sets[t - 1]

    def cumulative(self, t: int) -> tuple[int, ...]:
        self._check(t)
        return tuple(sorted(c for cs in self.class_sets[:t] for c in cs))

    def _check(self, t: int) -> None:
        if not 1 <= t <= self.num_tasks:
            raise ConfigError(f"task index {t} outside 1..{self.num_tasks}")


@dataclass(frozen=True)
class ClientPartition:
    """``assignments[t-1][i]`` indexes task t's training subset for client i."""

    assignments: tuple[tuple[np.ndarray, ...], ...]
    num_clients: int
    alpha: float
    seed: int

    def client_indices(self, t: int, client: int) -> np.ndarray:
        return self.assignments[t - 1][client]


def generate_synthetic(
    num_classes: int,
    per_class: int,
    input_dim: int,
    cluster_spread: float,
    seed: int,
    *,
    separation: float = 1.0,
) -> tuple[Dataset, Dataset]:
    """Isotropic Gaussian clusters around random class means, split 80/20 per class."""
    if num_classes < 2 or per_class < 2:
        raise ConfigError("need at least 2 classes and 2 samples per class")
    rng = np.random.default_rng(seed)
    means = rng.normal(scale=separation, size=(num_classes, input_dim))
    n_train = int(per_class * 0.8)
    n_train = min(max(n_train, 1), per_class - 1)
    tr_x, tr_y, te_x, te_y = [], [], [], []
    for c in range(num_classes):
        pts = means[c] + cluster_spread * rng.normal(size=(per_class, input_dim))
        tr_x.append(pts[:n_train])
        te_x.append(pts[n_train:])
        tr_y.append(np.full(n_train, c))
        te_y.append(np.full(per_class - n_train, c))
    train = Dataset(np.concatenate(tr_x), np.concatenate(tr_y).astype(np.int64), num_classes, "train")
    test = Dataset(np.concatenate(te_x), np.concatenate(te_y).astype(np.int64), num_classes, "test")
    return train, test


def _manifest_path(path: Path) -> Path:
    return path.with_suffix(".json")


def save_feature_file(dataset: Dataset, path: str | Path) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["label", *(f"f{k}" for k in range(dataset.input_dim))])
        for y, row in zip(dataset.labels, dataset.features):
            writer.writerow([int(y), *(repr(float(v)) for v in row)])
    manifest = {"C": dataset.num_classes, "D_in": dataset.input_dim, "split": dataset.split}
    _manifest_path(path).write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")


def load_feature_file(path: str | Path) -> Dataset:
    """Read a ``label,f0,...`` CSV plus its sidecar ``.json`` manifest declaring C, D_in and split."""
    path = Path(path)
    mpath = _manifest_path(path)
    if not path.is_file():
        raise ConfigError(f"feature file not found: {path}")
    if not mpath.is_file():
        raise ConfigError(f"manifest not found: {mpath}")
    try:
        manifest = json.loads(mpath.read_text(encoding="utf-8"))
        num_classes, input_dim = int(manifest["C"]), int(manifest["D_in"])
        split = str(manifest.get("split", "train"))
    except (ValueError, KeyError, TypeError) as exc:
        raise ConfigError(f"bad manifest {mpath}: {exc}") from exc

    labels, rows = [], []
    with path.open(encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        expected = ["label", *(f"f{k}" for k in range(input_dim))]
        if header != expected:
            raise ConfigError(f"{path}: header does not match D_in={input_dim}")
        for i, rec in enumerate(reader):
            if len(rec) != input_dim + 1:
                raise ConfigError(f"{path}: row {i} has {len(rec) - 1} features, expected {input_dim}")
            try:
                y = int(rec[0])
                vals = [float(v) for v in rec[1:]]
            except ValueError as exc:
                raise ConfigError(f"{path}: row {i} does not parse: {exc}") from exc
            if not 0 <= y < num_classes:
                raise ConfigError(f"{path}: row {i} label {y} outside [0, {num_classes})")
            labels.append(y)
            rows.append(vals)
    if not rows:
        raise ConfigError(f"{path}: no samples")
    return Dataset(np.array(rows, dtype=float), np.array(labels, dtype=np.int64), num_classes, split)


def split_tasks(dataset: Dataset, schedule: TaskSchedule) -> list[Dataset]:
    if dataset.num_classes != schedule.num_classes:
        raise ConfigError(f"dataset has {dataset.num_classes} classes, schedule covers {schedule.num_classes}")
    return [dataset.select_classes(cs) for cs in schedule.class_sets]


def cumulative_test_set(test: Dataset, schedule: TaskSchedule, t: int) -> Dataset:
    return test.select_classes(schedule.cumulative(t))


def largest_remainder(proportions: np.ndarray, total: int) -> np.ndarray:
    """Integer apportionment of ``total`` by Hamilton's method; ties go to the lower index."""
    quotas = np.asarray(proportions, dtype=float) * total
    counts = np.floor(quotas).astype(np.int64)
    short = total - int(counts.sum())
    if short > 0:
        order = np.argsort(-(quotas - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


def dirichlet_partition(task_data: Dataset, num_clients: int, alpha: float, seed) -> list[np.ndarray]:
    """Split one task's samples across clients with per-class Dirichlet(alpha) shares.

    ``seed`` may be an int or a ``numpy.random.Generator``. Returns sorted index
    arrays into ``task_data``; clients may end up empty.
    """
    if num_clients < 1:
        raise ConfigError("need at least one client")
    if not alpha > 0:
        raise ConfigError("Dirichlet concentration must be positive")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    parts: list[list[np.ndarray]] = [[] for _ in range(num_clients)]
    for c in np.unique(task_data.labels):
        idx = np.flatnonzero(task_data.labels == c)
        idx = idx[rng.permutation(len(idx))]
        props = rng.dirichlet(np.full(num_clients, float(alpha)))
        if not np.isfinite(props).all() or props.sum() <= 0:
            # gamma underflow at tiny alpha: all mass to one client
            props = np.zeros(num_clients)
            props[rng.integers(num_clients)] = 1.0
        counts = largest_remainder(props, len(idx))
        bounds = np.concatenate([[0], np.cumsum(counts)])
        for i in range(num_clients):
            parts[i].append(idx[bounds[i] : bounds[i + 1]])
    return [np.sort(np.concatenate(p)) if p else np.empty(0, dtype=np.int64) for p in parts]
