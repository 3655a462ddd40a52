import numpy as np
import pytest

from fedcil.client import ClientUpdate
from fedcil.errors import ConfigError
from fedcil.memory import PrototypeStore
from fedcil.nn import ModelParams
from fedcil.server import (
    aggregate,
    aggregate_classifier,
    aggregate_feature_extractor,
    aggregate_prototypes,
    average_classifier,
    class_aggregation_weights,
    comm_cost,
)

TRIALS = 100


def test_weights_direct_example_and_fallback():
    counts = np.array([[3, 0], [1, 0], [0, 0], [0, 0], [0, 0]])
    alpha = class_aggregation_weights(counts)
    np.testing.assert_allclose(alpha[0], [0.75, 0.25, 0, 0, 0])
    np.testing.assert_allclose(alpha[1], [0.2] * 5)


def test_weight_simplex_randomized():
    rng = np.random.default_rng(0)
    for _ in range(TRIALS):
        N, C = rng.integers(1, 7), rng.integers(1, 9)
        counts = rng.integers(0, 4, size=(N, C)) * (rng.random((N, C)) < 0.6)
        alpha = class_aggregation_weights(counts)
        assert (alpha >= 0).all()
        np.testing.assert_allclose(alpha.sum(axis=1), 1.0, atol=1e-12)
        held = counts.sum(axis=0) > 0
        assert (alpha[held][counts.T[held] == 0] == 0).all()


def test_rare_class_isolation_randomized():
    rng = np.random.default_rng(1)
    for _ in range(TRIALS):
        N, C, d = rng.integers(2, 6), rng.integers(2, 6), rng.integers(1, 5)
        owner, rare = rng.integers(N), rng.integers(C)
        counts = rng.integers(1, 5, size=(N, C))
        counts[:, rare] = 0
        counts[owner, rare] = rng.integers(1, 10)
        clfs = [(rng.normal(size=(C, d)), rng.normal(size=C)) for _ in range(N)]
        prev = (rng.normal(size=(C, d)), rng.normal(size=C))
        W, b = aggregate_classifier(clfs, class_aggregation_weights(counts), prev, range(C))
        assert np.abs(W[rare] - clfs[owner][0][rare]).max() <= 1e-12
        assert abs(b[rare] - clfs[owner][1][rare]) <= 1e-12


def test_fedavg_reduction_randomized():
    rng = np.random.default_rng(2)
    for _ in range(TRIALS):
        N, C, d = rng.integers(1, 6), rng.integers(1, 6), rng.integers(1, 5)
        counts = np.tile(rng.integers(1, 9, size=C), (N, 1))
        clfs = [(rng.normal(size=(C, d)), rng.normal(size=C)) for _ in range(N)]
        prev = (np.zeros((C, d)), np.zeros(C))
        W, b = aggregate_classifier(clfs, class_aggregation_weights(counts), prev, range(C))
        W0, b0 = average_classifier(clfs)
        np.testing.assert_allclose(W, W0, atol=1e-12, rtol=0)
        np.testing.assert_allclose(b, b0, atol=1e-12, rtol=0)


def test_pooled_mean_prototypes_randomized():
    rng = np.random.default_rng(3)
    for _ in range(TRIALS):
        N, C, d = rng.integers(1, 5), rng.integers(1, 5), rng.integers(1, 4)
        stores, counts, pooled = [], np.zeros((N, C), dtype=int), {c: [] for c in range(C)}
        for i in range(N):
            store = PrototypeStore(d)
            for c in range(C):
                n = int(rng.integers(0, 4))
                feats = rng.normal(size=(n, d))
                for z in feats:
                    store.update(c, z)
                counts[i, c] = n
                pooled[c].extend(feats)
            stores.append(store)
        glob = aggregate_prototypes(stores, counts)
        for c in range(C):
            if pooled[c]:
                np.testing.assert_allclose(glob.vectors[c], np.mean(pooled[c], axis=0), atol=1e-12, rtol=0)
            else:
                assert c not in glob.vectors


def test_weighted_rows_direct_example():
    W1, W2 = np.ones((1, 2)), np.full((1, 2), 5.0)
    alpha = np.array([[0.75, 0.25]])
    W, _ = aggregate_classifier([(W1, np.zeros(1)), (W2, np.zeros(1))], alpha, (np.zeros((1, 2)), np.zeros(1)), [0])
    np.testing.assert_allclose(W, [[2.0, 2.0]])


def test_inactive_rows_keep_previous():
    prev = (np.full((3, 2), 9.0), np.full(3, 9.0))
    clfs = [(np.zeros((3, 2)), np.zeros(3))] * 2
    W, b = aggregate_classifier(clfs, class_aggregation_weights(np.ones((2, 3))), prev, [0])
    assert (W[1:] == 9).all() and (b[1:] == 9).all() and (W[0] == 0).all()


def test_extractor_mean_and_symmetry():
    rng = np.random.default_rng(4)
    layers = [[(rng.normal(size=(3, 2)), rng.normal(size=3))] for _ in range(3)]
    out = aggregate_feature_extractor(layers)
    np.testing.assert_allclose(out[0][0], np.mean([l[0][0] for l in layers], axis=0), atol=1e-12)
    w, b = layers[0][0]
    zero = aggregate_feature_extractor([[(w, b)], [(-w, -b)]])
    assert not zero[0][0].any() and not zero[0][1].any()
    with pytest.raises(ConfigError):
        aggregate_feature_extractor([[(w, b)], [(np.zeros((2, 2)), np.zeros(2))]])


def test_prototypes_two_clients_example():
    p, q = PrototypeStore(2), PrototypeStore(2)
    p.update(0, np.array([4.0, 0.0]))
    for _ in range(3):
        q.update(0, np.array([0.0, 4.0]))
    glob = aggregate_prototypes([p, q], np.array([[1], [3]]))
    np.testing.assert_allclose(glob.vectors[0], [1.0, 3.0])


def test_comm_cost_model():
    assert comm_cost(10, 1, 1) == 48
    assert comm_cost(1, 45, 256) - 4 == 46_260
    assert abs(46_260 / 45_000 - 1) < 0.03
    model_bytes = comm_cost(21_800_000, 1, 1) - 8
    assert abs(model_bytes / 83e6 - 1) < 0.10


def test_aggregate_without_class_awareness_is_fedavg():
    rng = np.random.default_rng(5)
    ups = []
    for i in range(3):
        params = ModelParams.init(3, [4], 2, rng)
        store = PrototypeStore(4)
        store.update(0, rng.normal(size=4))
        ups.append(ClientUpdate(params, store, np.array([1 + i, 0])))
    prev = ModelParams.init(3, [4], 2, rng)
    glob, protos, _ = aggregate(ups, prev, [0, 1], class_aware=False)
    np.testing.assert_allclose(glob.W, np.mean([u.params.W for u in ups], axis=0), atol=1e-12)
    assert protos.classes() == [0]
