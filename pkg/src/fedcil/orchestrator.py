"""End-to-end federated class-incremental experiments, metrics and baseline suites."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import nn, server
from .client import ClientState, local_train
from .config import ExperimentConfig, Mechanisms
from .data import (
    Dataset,
    TaskSchedule,
    cumulative_test_set,
    dirichlet_partition,
    generate_synthetic,
    load_feature_file,
    split_tasks,
)
from .errors import ConfigError, NumericalError
from .memory import PrototypeStore
from .nn import ModelParams
from .seeding import seed_sequence, stream

log = logging.getLogger(__name__)


@dataclass
class Evaluation:
    accuracy: float
    per_class: list[float | None]
    confusion: np.ndarray


def evaluate(params: ModelParams, test: Dataset) -> Evaluation:
    """Argmax accuracy overall and per class (None for classes absent from ``test``).

    Ties resolve to the lowest class index.
    """
    if len(test) == 0:
        raise ConfigError("cannot evaluate on an empty test set")
    pred = nn.forward(params, test.features).argmax(axis=1)
    C = params.num_classes
    confusion = np.zeros((C, C), dtype=np.int64)
    np.add.at(confusion, (test.labels, pred), 1)
    support = confusion.sum(axis=1)
    per_class = [float(confusion[c, c] / support[c]) if support[c] else None for c in range(C)]
    return Evaluation(float(np.trace(confusion) / len(test)), per_class, confusion)


@dataclass
class MetricsReport:
    accuracies: list[float]
    final_accuracy: float
    degradation: float
    average_accuracy: float
    per_class_final: list[float | None] = field(default_factory=list)
    old_accuracy: list[float | None] = field(default_factory=list)
    new_accuracy: list[float | None] = field(default_factory=list)
    round_accuracies: list[list[float]] = field(default_factory=list)
    forgetting_trace: list[dict] = field(default_factory=list)
    conflict_trace: list[dict] = field(default_factory=list)
    drift_norms: list[dict] = field(default_factory=list)
    comm_cost_bytes: int = 0
    comm_cost_per_round: list[int] = field(default_factory=list)
    projection_min_dot: float | None = None
    projection_max_norm_growth: float | None = None
    teacher_digests: list[str | None] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "A": self.accuracies,
            "A_T": self.final_accuracy,
            "PD": self.degradation,
            "A_avg": self.average_accuracy,
            "per_class_final": self.per_class_final,
            "old_class_accuracy": self.old_accuracy,
            "new_class_accuracy": self.new_accuracy,
            "round_accuracy": self.round_accuracies,
            "forgetting_trace": self.forgetting_trace,
            "conflict_trace": self.conflict_trace,
            "drift_norms": self.drift_norms,
            "comm_cost_bytes": self.comm_cost_bytes,
            "comm_cost_per_round": self.comm_cost_per_round,
            "projection_min_dot": self.projection_min_dot,
            "projection_max_norm_growth": self.projection_max_norm_growth,
            "teacher_digests": self.teacher_digests,
        }


def compute_metrics(accuracies, traces: dict | None = None) -> MetricsReport:
    """Final accuracy, degradation (first minus last) and the mean over tasks."""
    acc = [float(a) for a in accuracies]
    if not acc:
        raise ConfigError("need at least one task evaluation")
    report = MetricsReport(acc, acc[-1], acc[0] - acc[-1], float(np.mean(acc)))
    for key, value in (traces or {}).items():
        setattr(report, key, value)
    return report


@dataclass
class RunResult:
    report: MetricsReport
    traces: list[dict]
    final_params: ModelParams


def load_data(config: ExperimentConfig) -> tuple[Dataset, Dataset]:
    if config.train_file is not None:
        train, test = load_feature_file(config.train_file), load_feature_file(config.test_file)
        if train.num_classes != config.num_classes or test.num_classes != config.num_classes:
            raise ConfigError(f"num_classes={config.num_classes} disagrees with feature file manifests")
        if train.input_dim != config.input_dim or test.input_dim != config.input_dim:
            raise ConfigError(f"input_dim={config.input_dim} disagrees with feature file manifests")
        return train, test
    data_seed = int(stream(config.seed, "data").integers(2**63))
    return generate_synthetic(config.num_classes, config.per_class, config.input_dim, config.cluster_spread,
                              data_seed, separation=config.class_separation)


def build_schedule(config: ExperimentConfig) -> TaskSchedule:
    if config.schedule is not None:
        schedule = TaskSchedule(config.schedule, config.num_classes)
        if schedule.num_tasks != config.num_tasks:
            raise ConfigError(f"schedule has {schedule.num_tasks} tasks, num_tasks={config.num_tasks}")
        return schedule
    return TaskSchedule.contiguous(config.num_classes, config.num_tasks)


def run_experiment(config: ExperimentConfig, data: tuple[Dataset, Dataset] | None = None) -> RunResult:
    """Run every task and round, aggregating after each round and evaluating after each task."""
    train, test = data if data is not None else load_data(config)
    schedule = build_schedule(config)
    task_data = split_tasks(train, schedule)
    N, C, d = config.num_clients, config.num_classes, config.embed_dim
    flags = config.methods

    partitions = [
        dirichlet_partition(td, N, config.dirichlet_alpha, stream(config.seed, "partition", t))
        for t, td in enumerate(task_data, start=1)
    ]
    global_params = ModelParams.init(config.input_dim, list(config.hidden), C, stream(config.seed, "init"))
    global_protos = PrototypeStore(d, "global")
    snapshot: PrototypeStore | None = None
    teacher: ModelParams | None = None
    clients = [ClientState(i, C, d, config.memory_budget) for i in range(N)]

    traces: list[dict] = []
    accuracies: list[float] = []
    old_acc: list[float | None] = []
    new_acc: list[float | None] = []
    round_acc: list[list[float]] = []
    drift_norms: list[dict] = []
    teacher_digests: list[str | None] = []
    comm_rounds: list[int] = []
    min_dot: float | None = None
    max_growth: float | None = None
    last_eval: Evaluation | None = None

    for t in range(1, schedule.num_tasks + 1):
        active = schedule.cumulative(t)
        if t > 1:
            teacher = global_params.copy()
            snapshot = global_protos.copy("snapshot")
        digest = teacher.digest() if teacher is not None else None
        teacher_digests.append(digest)
        per_round: list[float] = []
        for r in range(1, config.global_rounds + 1):
            updates = []
            for i, state in enumerate(clients):
                local = task_data[t - 1].subset(partitions[t - 1][i])
                update, trace = local_train(
                    global_params, global_protos, snapshot, teacher, local, t, config, state, schedule,
                    seed_sequence(config.seed, "client", i, t, r), round_index=r,
                )
                updates.append(update)
                rec = trace.to_json()
                traces.append(rec)
                if rec["min_dot_after_projection"] is not None:
                    min_dot = rec["min_dot_after_projection"] if min_dot is None else min(min_dot, rec["min_dot_after_projection"])
                if rec["max_norm_growth"] is not None:
                    max_growth = rec["max_norm_growth"] if max_growth is None else max(max_growth, rec["max_norm_growth"])
            if teacher is not None and teacher.digest() != digest:
                raise RuntimeError("teacher model changed within a task")
            global_params, global_protos, _ = server.aggregate(updates, global_params, active, flags.ca)
            if not global_params.is_finite():
                raise NumericalError(f"global model became non-finite in task {t} round {r}")
            cost = server.comm_cost(global_params.size(), len(active), d)
            comm_rounds.append(cost * N)
            traces.append({"kind": "aggregation", "task": t, "round": r, "comm_cost_bytes": cost,
                           "comm_cost_total_bytes": cost * N})
            if config.eval_every_round:
                per_round.append(evaluate(global_params, cumulative_test_set(test, schedule, t)).accuracy)
        round_acc.append(per_round)

        ev = evaluate(global_params, cumulative_test_set(test, schedule, t))
        last_eval = ev
        accuracies.append(ev.accuracy)
        new_classes = schedule.classes(t)
        old_classes = [c for c in active if c not in new_classes]
        new_acc.append(_group_accuracy(ev, new_classes))
        old_acc.append(_group_accuracy(ev, old_classes) if old_classes else None)
        if snapshot is not None:
            norms = {
                str(c): float(np.linalg.norm(global_protos.vectors[c] - snapshot.vectors[c]))
                for c in sorted(set(global_protos.vectors) & set(snapshot.vectors))
            }
            drift_norms.append({"transition": f"{t - 1}->{t}", "mean": float(np.mean(list(norms.values()))) if norms else 0.0,
                                "per_class": norms})
        log.info("task %d: A_t=%.4f", t, ev.accuracy)

    client_traces = [rec for rec in traces if rec["kind"] == "client"]
    report = compute_metrics(accuracies, {
        "per_class_final": last_eval.per_class if last_eval else [],
        "old_accuracy": old_acc,
        "new_accuracy": new_acc,
        "round_accuracies": round_acc,
        "forgetting_trace": [{k: rec[k] for k in ("client", "task", "round", "F", "F_compensated", "F_raw",
                                                  "lambda_distill", "lambda_replay")} for rec in client_traces],
        "conflict_trace": [{k: rec[k] for k in ("client", "task", "round", "conflict_rate", "mean_cosine")}
                           for rec in client_traces],
        "drift_norms": drift_norms,
        "comm_cost_bytes": int(sum(comm_rounds)),
        "comm_cost_per_round": comm_rounds,
        "projection_min_dot": min_dot,
        "projection_max_norm_growth": max_growth,
        "teacher_digests": teacher_digests,
    })
    return RunResult(report, traces, global_params)


def _group_accuracy(ev: Evaluation, classes) -> float | None:
    rows = [c for c in classes if ev.confusion[c].sum() > 0]
    if not rows:
        return None
    return float(sum(ev.confusion[c, c] for c in rows) / sum(ev.confusion[c].sum() for c in rows))


# --------------------------------------------------------------------------
# baseline and ablation suites


BASELINES: dict[str, Mechanisms] = {
    "FedAvg": Mechanisms.none(),
    "FedAvg+KD": Mechanisms.only("kd"),
    "FedAvg+Replay": Mechanisms.only("mr"),
    "MLFCIL": Mechanisms(),
}
JOINT = "Joint"

ABLATION_GRID: list[tuple[str, Mechanisms]] = [
    (m.label(), m)
    for m in (
        Mechanisms.none(),
        Mechanisms.only("cw"),
        Mechanisms.only("cw", "kd"),
        Mechanisms.only("cw", "kd", "mr"),
        Mechanisms.only("cw", "kd", "mr", "ca"),
        Mechanisms.only("cw", "kd", "mr", "ca", "ab"),
        Mechanisms.only("cw", "kd", "mr", "ca", "dc"),
        Mechanisms.only("cw", "kd", "mr", "ca", "gp"),
        Mechanisms.only("cw", "kd", "mr", "ca", "ab", "dc"),
        Mechanisms.only("cw", "kd", "mr", "ca", "ab", "gp"),
        Mechanisms(),
    )
]

NONIID_ALPHAS = (0.1, 0.3, 0.5, 1.0, 5.0)


def joint_config(config: ExperimentConfig) -> ExperimentConfig:
    """Single task holding every class, trained FedAvg-style for the same total number of rounds."""
    return config.replace(
        num_tasks=1,
        schedule=None,
        global_rounds=config.global_rounds * config.num_tasks,
        methods=Mechanisms.none(),
    )


def baseline_configs(config: ExperimentConfig) -> list[tuple[str, ExperimentConfig]]:
    runs = [(name, config.replace(methods=m)) for name, m in BASELINES.items()]
    runs.append((JOINT, joint_config(config)))
    return runs


def run_baseline_suite(config: ExperimentConfig) -> dict[str, MetricsReport]:
    data = load_data(config)
    return {name: run_experiment(cfg, data).report for name, cfg in baseline_configs(config)}
