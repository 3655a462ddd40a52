"""Class prototypes, the class-quota reservoir buffer, and prototype drift compensation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError


@dataclass
class PrototypeStore:
    """Per-class mean embeddings with observation counts.

    ``role`` is ``"local"``, ``"global"`` or ``"snapshot"``; only local stores
    take online updates.
    """

    dim: int
    role: str = "local"
    vectors: dict[int, np.ndarray] = field(default_factory=dict)
    counts: dict[int, int] = field(default_factory=dict)

    def update(self, c: int, z: np.ndarray) -> None:
        if self.role != "local":
            raise ConfigError(f"cannot update a {self.role} prototype store")
        z = np.asarray(z, dtype=float)
        if z.shape != (self.dim,):
            raise ConfigError(f"embedding shape {z.shape} does not match prototype dim {self.dim}")
        n = self.counts.get(c, 0)
        if n == 0:
            self.vectors[c] = z.copy()
        else:
            self.vectors[c] = (n * self.vectors[c] + z) / (n + 1)
        self.counts[c] = n + 1

    def update_batch(self, labels: np.ndarray, embeddings: np.ndarray) -> None:
        for c, z in zip(labels, embeddings):
            self.update(int(c), z)

    def classes(self) -> list[int]:
        return sorted(self.vectors)

    def copy(self, role: str | None = None) -> PrototypeStore:
        return PrototypeStore(
            self.dim,
            role or self.role,
            {c: v.copy() for c, v in self.vectors.items()},
            dict(self.counts),
        )

    def to_json(self) -> dict:
        return {
            str(c): {"count": int(self.counts.get(c, 0)), "vector": [float(x) for x in self.vectors[c]]}
            for c in self.classes()
        }


def prototype_update(store: PrototypeStore, c: int, z: np.ndarray) -> None:
    store.update(c, z)


def per_class_quota(budget: int, classes_seen: int) -> int:
    if budget < 1 or classes_seen < 1:
        raise ConfigError("budget and classes_seen must be positive")
    return max(5, budget // classes_seen)


@dataclass
class ReplayBuffer:
    """Feature-level replay memory with per-class reservoir sampling.

    ``seen[c]`` counts class-c samples offered so far and sets the reservoir
    acceptance probability ``quota / seen[c]``.
    """

    budget: int
    dim: int
    slots: dict[int, list[np.ndarray]] = field(default_factory=dict)
    seen: dict[int, int] = field(default_factory=dict)

    def __len__(self) -> int:
        return sum(len(v) for v in self.slots.values())

    def class_size(self, c: int) -> int:
        return len(self.slots.get(c, ()))

    def insert(self, z: np.ndarray, c: int, quota: int, rng: np.random.Generator) -> bool:
        """Offer one embedding whose arrival is already counted in ``seen[c]``."""
        n = self.seen.get(c, 0)
        if n < 1:
            raise ConfigError(f"seen counter for class {c} must include the offered sample")
        slot = self.slots.setdefault(c, [])
        if len(slot) < quota and len(self) < self.budget:
            slot.append(np.array(z, dtype=float))
            return True
        if not slot:
            return False
        if rng.random() < quota / n:
            slot[int(rng.integers(len(slot)))] = np.array(z, dtype=float)
            return True
        return False

    def observe(self, z: np.ndarray, c: int, quota: int, rng: np.random.Generator) -> bool:
        self.seen[c] = self.seen.get(c, 0) + 1
        return self.insert(z, c, quota, rng)

    def rebalance(self, quota: int, rng: np.random.Generator) -> None:
        """Down-sample every class above ``quota`` uniformly at random."""
        for c in sorted(self.slots):
            slot = self.slots[c]
            if len(slot) > quota:
                keep = np.sort(rng.choice(len(slot), size=quota, replace=False))
                self.slots[c] = [slot[k] for k in keep]

    def arrays(self) -> tuple[np.ndarray, np.ndarray]:
        """All entries as ``(embeddings[n, d], labels[n])`` in class-then-slot order."""
        zs, ys = [], []
        for c in sorted(self.slots):
            for z in self.slots[c]:
                zs.append(z)
                ys.append(c)
        if not zs:
            return np.empty((0, self.dim)), np.empty(0, dtype=np.int64)
        return np.stack(zs), np.array(ys, dtype=np.int64)

    def to_json(self) -> dict:
        return {
            str(c): {"count": int(self.seen.get(c, 0)), "entries": [[float(x) for x in z] for z in self.slots[c]]}
            for c in sorted(self.slots)
        }


def buffer_insert(buf: ReplayBuffer, z: np.ndarray, c: int, quota: int, rng: np.random.Generator) -> bool:
    return buf.insert(z, c, quota, rng)


def sample_replay(buf: ReplayBuffer, batch_size: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray] | None:
    """Uniform draw without replacement (with replacement if ``batch_size`` exceeds the buffer).

    Returns None for an empty buffer so callers can skip the replay term.
    """
    zs, ys = buf.arrays()
    if len(ys) == 0:
        return None
    idx = rng.choice(len(ys), size=batch_size, replace=batch_size > len(ys))
    return zs[idx], ys[idx]


DriftTable = dict[int, np.ndarray]


def compute_drift(global_store: PrototypeStore, snapshot: PrototypeStore) -> DriftTable:
    """Per-class ``global - snapshot`` for classes present in both stores."""
    if global_store.dim != snapshot.dim:
        raise ConfigError(f"prototype dims differ: {global_store.dim} vs {snapshot.dim}")
    common = sorted(set(global_store.vectors) & set(snapshot.vectors))
    return {c: global_store.vectors[c] - snapshot.vectors[c] for c in common}


def drift_for(drift: DriftTable, labels: np.ndarray, dim: int) -> np.ndarray:
    """Stack drift rows per label; classes without an entry get zero."""
    zero = np.zeros(dim)
    return np.stack([drift.get(int(y), zero) for y in labels]) if len(labels) else np.empty((0, dim))


def compensate(z: np.ndarray, delta: np.ndarray) -> np.ndarray:
    z, delta = np.asarray(z, dtype=float), np.asarray(delta, dtype=float)
    if z.shape != delta.shape:
        raise ConfigError(f"embedding {z.shape} and drift {delta.shape} differ in shape")
    return z + delta
