"""Server-side aggregation: extractor averaging, per-class classifier fusion,
prototype fusion and the per-round communication-cost model."""

from __future__ import annotations

from collections.abc import Iterable, Sequence

import numpy as np

from .errors import ConfigError
from .memory import PrototypeStore
from .nn import ModelParams

FLOAT_BYTES = 4
COUNT_BYTES = 4


def class_aggregation_weights(counts: np.ndarray) -> np.ndarray:
    """``alpha[c, i]``: share of class c held by client i, uniform when nobody holds it.

    ``counts`` is an ``N x C`` matrix of per-client class counts.
    """
    counts = np.asarray(counts, dtype=float)
    if counts.ndim != 2 or counts.shape[0] < 1:
        raise ConfigError(f"counts must be an N x C matrix with N >= 1, got shape {counts.shape}")
    if (counts < 0).any():
        raise ConfigError("class counts must be nonnegative")
    n_clients, n_classes = counts.shape
    totals = counts.sum(axis=0)
    alpha = np.full((n_classes, n_clients), 1.0 / n_clients)
    held = totals > 0
    alpha[held] = (counts[:, held] / totals[held]).T
    return alpha


def aggregate_feature_extractor(extractors: Sequence[list[tuple[np.ndarray, np.ndarray]]]):
    """Unweighted element-wise mean over all clients' extractor layers."""
    if not extractors:
        raise ConfigError("no extractors to aggregate")
    ref = extractors[0]
    for k, layers in enumerate(extractors):
        if len(layers) != len(ref) or any(
            w.shape != rw.shape or b.shape != rb.shape for (w, b), (rw, rb) in zip(layers, ref)
        ):
            raise ConfigError(f"extractor {k} does not match the shape of extractor 0")
    n = len(extractors)
    out = []
    for j in range(len(ref)):
        w = sum(layers[j][0] for layers in extractors) / n
        b = sum(layers[j][1] for layers in extractors) / n
        out.append((w, b))
    return out


def aggregate_classifier(
    classifiers: Sequence[tuple[np.ndarray, np.ndarray]],
    alpha: np.ndarray,
    previous: tuple[np.ndarray, np.ndarray],
    active_classes: Iterable[int],
) -> tuple[np.ndarray, np.ndarray]:
    """Per-class weighted rows for active classes; other rows keep ``previous``."""
    W_prev, b_prev = previous
    for k, (W, b) in enumerate(classifiers):
        if W.shape != W_prev.shape or b.shape != b_prev.shape:
            raise ConfigError(f"classifier {k} shape {W.shape} does not match global {W_prev.shape}")
    if alpha.shape != (W_prev.shape[0], len(classifiers)):
        raise ConfigError(f"aggregation weights {alpha.shape} do not match {W_prev.shape[0]} classes x "
                          f"{len(classifiers)} clients")
    W_new, b_new = W_prev.copy(), b_prev.copy()
    for c in sorted(set(int(c) for c in active_classes)):
        W_new[c] = sum(alpha[c, i] * W[c] for i, (W, _) in enumerate(classifiers))
        b_new[c] = sum(alpha[c, i] * b[c] for i, (_, b) in enumerate(classifiers))
    return W_new, b_new


def average_classifier(classifiers: Sequence[tuple[np.ndarray, np.ndarray]]) -> tuple[np.ndarray, np.ndarray]:
    """Plain FedAvg of every classifier row."""
    n = len(classifiers)
    return sum(W for W, _ in classifiers) / n, sum(b for _, b in classifiers) / n


def aggregate_prototypes(local_stores: Sequence[PrototypeStore], counts: np.ndarray) -> PrototypeStore:
    """Count-weighted mean prototype per class; classes nobody has seen are left out."""
    if not local_stores:
        raise ConfigError("no prototype stores to aggregate")
    dim = local_stores[0].dim
    if any(s.dim != dim for s in local_stores):
        raise ConfigError("prototype stores disagree on embedding dim")
    counts = np.asarray(counts, dtype=float)
    out = PrototypeStore(dim, "global")
    for c in range(counts.shape[1]):
        total = counts[:, c].sum()
        if total <= 0:
            continue
        acc = np.zeros(dim)
        for i, store in enumerate(local_stores):
            if counts[i, c] > 0:
                acc += counts[i, c] * store.vectors[c]
        out.vectors[c] = acc / total
        out.counts[c] = int(total)
    return out


def comm_cost(num_params: int, num_classes_seen: int, dim: int) -> int:
    """Bytes uploaded per client per round: fp32 parameters plus one count and one prototype per class."""
    if num_params < 1 or num_classes_seen < 1 or dim < 1:
        raise ConfigError("comm_cost arguments must be positive")
    return num_params * FLOAT_BYTES + num_classes_seen * (COUNT_BYTES + dim * FLOAT_BYTES)


def aggregate(
    updates: Sequence,
    previous: ModelParams,
    active_classes: Iterable[int],
    class_aware: bool = True,
) -> tuple[ModelParams, PrototypeStore, np.ndarray]:
    """Fold client updates (in client-id order) into a new global model and prototype store."""
    counts = np.stack([u.counts for u in updates])
    layers = aggregate_feature_extractor([u.params.layers for u in updates])
    classifiers = [(u.params.W, u.params.b) for u in updates]
    alpha = class_aggregation_weights(counts)
    if class_aware:
        W, b = aggregate_classifier(classifiers, alpha, (previous.W, previous.b), active_classes)
    else:
        W, b = average_classifier(classifiers)
    protos = aggregate_prototypes([u.prototypes for u in updates], counts)
    return ModelParams(layers, W, b), protos, alpha
