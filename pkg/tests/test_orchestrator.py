import numpy as np
import pytest

from fedcil.config import ExperimentConfig, Mechanisms
from fedcil.data import Dataset
from fedcil.errors import ConfigError
from fedcil.nn import ModelParams
from fedcil.orchestrator import (
    ABLATION_GRID,
    BASELINES,
    compute_metrics,
    evaluate,
    joint_config,
    run_experiment,
)


def tiny(**kw):
    base = dict(num_classes=6, num_tasks=3, per_class=40, input_dim=4, hidden=(8, 8), num_clients=3,
                global_rounds=2, local_epochs=1, memory_budget=60, batch_size=16)
    base.update(kw)
    return ExperimentConfig(**base)


def test_metrics_reproduce_table_rows():
    m = compute_metrics([78.2, 70.5, 67.8])
    assert round(m.average_accuracy, 1) == 72.2 and round(m.degradation, 1) == 10.4
    f = compute_metrics([78.2, 52.4, 41.3])
    assert round(f.average_accuracy, 1) == 57.3 and round(f.degradation, 1) == 36.9


def test_metrics_single_task():
    m = compute_metrics([0.8])
    assert (m.final_accuracy, m.average_accuracy, m.degradation) == (0.8, 0.8, 0.0)
    with pytest.raises(ConfigError):
        compute_metrics([])


def test_evaluate_oracles():
    d = 3
    params = ModelParams([(np.eye(d), np.zeros(d))], np.eye(d) * 10, np.zeros(d))
    x = np.eye(d)
    test = Dataset(x, np.arange(d), d, "test")
    ev = evaluate(params, test)
    assert ev.accuracy == 1.0 and ev.confusion.sum() == d
    const = ModelParams([(np.zeros((d, d)), np.zeros(d))], np.zeros((d, d)), np.zeros(d))
    assert evaluate(const, test).accuracy == pytest.approx(1 / d)
    partial = Dataset(x[:2], np.arange(2), d, "test")
    assert evaluate(params, partial).per_class[2] is None


def test_run_is_deterministic_and_well_formed():
    cfg = tiny()
    a, b = run_experiment(cfg), run_experiment(cfg)
    assert a.report.to_json() == b.report.to_json()
    r = a.report
    assert len(r.accuracies) == 3 and all(0 <= v <= 1 for v in r.accuracies)
    assert r.degradation == pytest.approx(r.accuracies[0] - r.accuracies[-1])
    assert r.teacher_digests[0] is None and len(set(r.teacher_digests[1:])) == 2
    assert len(r.drift_norms) == 2
    assert r.old_accuracy[0] is None and r.new_accuracy[0] is not None
    assert len(r.comm_cost_per_round) == 6


def test_all_flags_off_matches_fedavg_baseline():
    cfg = tiny(methods=Mechanisms.none())
    same = tiny(methods=BASELINES["FedAvg"])
    assert run_experiment(cfg).final_params.digest() == run_experiment(same).final_params.digest()


def test_single_task_has_no_stability_terms():
    r = run_experiment(tiny(num_tasks=1))
    assert r.report.degradation == 0.0
    assert all(t["lambda_distill"] == 0.0 for t in r.traces if t["kind"] == "client")


def test_projection_bounds_over_a_run():
    r = run_experiment(tiny()).report
    assert r.projection_min_dot >= -1e-12
    assert r.projection_max_norm_growth <= 1e-12


def test_per_round_evaluation_flag():
    r = run_experiment(tiny(eval_every_round=True)).report
    assert [len(x) for x in r.round_accuracies] == [2, 2, 2]


def test_joint_config_layout():
    j = joint_config(tiny())
    assert j.num_tasks == 1 and j.global_rounds == 6 and j.methods == Mechanisms.none()


def test_ablation_grid_lattice():
    labels = [label for label, _ in ABLATION_GRID]
    assert len(labels) == 11
    assert labels[0] == "FedAvg (none)" and labels[-1] == "Full (all)"
    assert labels[4] == "+CW+KD+MR+CA"
    assert ABLATION_GRID[-1][1] == Mechanisms()
    diff = [m for m in ("cw", "kd", "mr", "ca", "ab", "dc", "gp")
            if getattr(ABLATION_GRID[0][1], m) != getattr(ABLATION_GRID[1][1], m)]
    assert diff == ["cw"]


def test_baseline_flags():
    assert BASELINES["FedAvg"].enabled() == []
    assert BASELINES["FedAvg+KD"].enabled() == ["kd"]
    assert BASELINES["FedAvg+Replay"].enabled() == ["mr"]
    assert BASELINES["MLFCIL"] == Mechanisms()
