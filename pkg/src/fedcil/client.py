"""Client-side local training: class reweighting, distillation, drift-compensated
replay, forgetting-aware loss weights and step-level gradient projection."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from .config import ExperimentConfig, Mechanisms
from .data import Dataset, TaskSchedule
from .errors import ConfigError
from .memory import (
    DriftTable,
    PrototypeStore,
    ReplayBuffer,
    compute_drift,
    drift_for,
    per_class_quota,
    sample_replay,
)
from .nn import GradientVector, Group, ModelParams
from .seeding import substreams


@dataclass
class ClassWeights:
    weights: np.ndarray
    beta: float
    seen: frozenset[int]
    new: frozenset[int]


def compute_class_weights(counts, seen, new, beta: float, num_classes: int | None = None) -> ClassWeights:
    """Inverse-frequency weights over the seen classes, boosted by ``beta`` for new ones.

    A seen class with no local samples gets the neutral base weight 1.0.
    Classes outside ``seen`` keep weight 1.0.
    """
    counts = np.asarray(counts, dtype=float)
    num_classes = len(counts) if num_classes is None else num_classes
    seen, new = frozenset(int(c) for c in seen), frozenset(int(c) for c in new)
    w = np.ones(num_classes)
    if seen:
        total = sum(counts[c] for c in seen)
        for c in seen:
            if counts[c] > 0:
                w[c] = total / (len(seen) * counts[c])
    for c in new:
        w[c] *= beta
    return ClassWeights(w, beta, seen, new)


@dataclass(frozen=True)
class AdaptiveWeights:
    distill: float
    replay: float


def adapt_loss_weights(
    score: float,
    base_distill: float = 0.5,
    base_replay: float = 0.3,
    gamma: float = 2.0,
    max_distill: float = 1.5,
    max_replay: float = 1.0,
) -> AdaptiveWeights:
    scale = 1.0 + gamma * score
    return AdaptiveWeights(min(base_distill * scale, max_distill), min(base_replay * scale, max_replay))


@dataclass(frozen=True)
class ForgettingScore:
    score: float
    compensated_error: float
    raw_error: float


def forgetting_score(params: ModelParams, buffer: ReplayBuffer, drift: DriftTable) -> ForgettingScore | None:
    """Worse of the classifier's buffer error rates on raw and drift-compensated embeddings.

    None when the buffer is empty.
    """
    zs, ys = buffer.arrays()
    if len(ys) == 0:
        return None
    raw_err = 1.0 - float(np.mean(nn.forward_classifier(params, zs).argmax(axis=1) == ys))
    comp = zs + drift_for(drift, ys, zs.shape[1])
    comp_err = 1.0 - float(np.mean(nn.forward_classifier(params, comp).argmax(axis=1) == ys))
    return ForgettingScore(max(comp_err, raw_err), comp_err, raw_err)


def project_gradient(g_plas: GradientVector, g_stab: GradientVector) -> GradientVector:
    """Remove the component of ``g_plas`` that opposes ``g_stab``; identity when they do not conflict."""
    dot = g_plas.dot(g_stab)
    sq = float(g_stab.values @ g_stab.values)
    if sq == 0.0 or dot >= 0.0:
        return g_plas
    return GradientVector(g_plas.group, g_plas.values - (dot / sq) * g_stab.values)


def replay_loss(params: ModelParams, embeddings: np.ndarray, labels: np.ndarray) -> float:
    logits = nn.forward_classifier(params, embeddings)
    return nn.weighted_cross_entropy(logits, labels, np.ones(params.num_classes))


@dataclass
class ClientState:
    """What a client keeps between rounds: replay memory, local prototypes, cumulative counts."""

    client_id: int
    num_classes: int
    dim: int
    budget: int
    task: int = 0
    buffer: ReplayBuffer = None  # type: ignore[assignment]
    prototypes: PrototypeStore = None  # type: ignore[assignment]
    counts: np.ndarray = None  # type: ignore[assignment]

    def __post_init__(self) -> None:
        if self.buffer is None:
            self.buffer = ReplayBuffer(self.budget, self.dim)
        if self.prototypes is None:
            self.prototypes = PrototypeStore(self.dim, "local")
        if self.counts is None:
            self.counts = np.zeros(self.num_classes, dtype=np.int64)


@dataclass
class ClientUpdate:
    params: ModelParams
    prototypes: PrototypeStore
    counts: np.ndarray


@dataclass
class RoundTrace:
    client: int
    task: int
    round: int
    forgetting: float | None = None
    forgetting_compensated: float | None = None
    forgetting_raw: float | None = None
    lambda_distill: float = 0.0
    lambda_replay: float = 0.0
    steps: int = 0
    conflict_steps: int = 0
    stab_steps: int = 0
    loss_cls: float = 0.0
    loss_distill: float = 0.0
    loss_replay: float = 0.0
    samples_seen: int = 0
    buffer_size: int = 0
    min_dot_after_projection: float | None = None
    max_norm_growth: float | None = None
    cosines: list[float] = field(default_factory=list)

    @property
    def conflict_rate(self) -> float:
        return self.conflict_steps / self.stab_steps if self.stab_steps else 0.0

    def to_json(self) -> dict:
        return {
            "kind": "client",
            "client": self.client,
            "task": self.task,
            "round": self.round,
            "F": self.forgetting,
            "F_compensated": self.forgetting_compensated,
            "F_raw": self.forgetting_raw,
            "lambda_distill": self.lambda_distill,
            "lambda_replay": self.lambda_replay,
            "conflict_rate": self.conflict_rate,
            "steps": self.steps,
            "loss_cls": self.loss_cls,
            "loss_distill": self.loss_distill,
            "loss_replay": self.loss_replay,
            "samples_seen": self.samples_seen,
            "buffer_size": self.buffer_size,
            "min_dot_after_projection": self.min_dot_after_projection,
            "max_norm_growth": self.max_norm_growth,
            "mean_cosine": float(np.mean(self.cosines)) if self.cosines else None,
        }


def round_loss_weights(
    params: ModelParams,
    state: ClientState,
    drift: DriftTable,
    task: int,
    config: ExperimentConfig,
    trace: RoundTrace,
) -> AdaptiveWeights:
    flags = config.methods
    if task == 1:
        return AdaptiveWeights(0.0, 0.0)
    lam = AdaptiveWeights(config.lambda_distill, config.lambda_replay)
    if flags.ab:
        fs = forgetting_score(params, state.buffer, drift)
        if fs is not None:
            trace.forgetting, trace.forgetting_compensated, trace.forgetting_raw = (
                fs.score, fs.compensated_error, fs.raw_error)
            lam = adapt_loss_weights(fs.score, config.lambda_distill, config.lambda_replay, config.gamma,
                                     config.lambda_distill_max, config.lambda_replay_max)
    return AdaptiveWeights(lam.distill if flags.kd else 0.0, lam.replay if flags.mr else 0.0)


def local_train(
    global_params: ModelParams,
    global_protos: PrototypeStore | None,
    snapshot_protos: PrototypeStore | None,
    teacher: ModelParams | None,
    data: Dataset,
    task: int,
    config: ExperimentConfig,
    state: ClientState,
    schedule: TaskSchedule,
    seed: np.random.SeedSequence,
    round_index: int = 1,
) -> tuple[ClientUpdate, RoundTrace]:
    """One round of client training starting from the broadcast global model.

    ``state`` (buffer, prototypes, counts) is mutated in place; the returned
    update carries copies.
    """
    if task < 1:
        raise ConfigError("task index starts at 1")
    if task > 1 and teacher is None and config.methods.kd:
        raise ConfigError("distillation needs a teacher model after the first task")
    flags: Mechanisms = config.methods
    rng_batch, rng_buffer, rng_replay = substreams(seed, 3)
    params = global_params.copy()
    trace = RoundTrace(state.client_id, task, round_index)

    quota = per_class_quota(config.memory_budget, len(schedule.cumulative(task)))
    if state.task != task:
        state.task = task
        state.buffer.rebalance(quota, rng_buffer)

    if len(data) == 0:
        trace.samples_seen = int(state.counts.sum())
        trace.buffer_size = len(state.buffer)
        return ClientUpdate(params, state.prototypes.copy(), state.counts.copy()), trace

    drift: DriftTable = {}
    if task > 1 and flags.dc and global_protos is not None and snapshot_protos is not None:
        drift = compute_drift(global_protos, snapshot_protos)
    lam = round_loss_weights(params, state, drift, task, config, trace)
    trace.lambda_distill, trace.lambda_replay = lam.distill, lam.replay
    use_kd = task > 1 and flags.kd and teacher is not None

    if flags.cw:
        present = set(int(c) for c in np.unique(data.labels))
        seen = {int(c) for c in np.flatnonzero(state.counts)} | present
        new = set(schedule.classes(task)) & seen
        weights = compute_class_weights(state.counts, seen, new, config.beta, params.num_classes).weights
    else:
        weights = np.ones(params.num_classes)

    opt = nn.OptimizerState(lr=config.lr)
    n = len(data)
    losses = np.zeros(3)
    for _ in range(config.local_epochs):
        order = rng_batch.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            x, y = data.features[idx], data.labels[idx]
            z, cache = nn.forward_features(params, x, cache=True)
            for yj, zj in zip(y, z):
                c = int(yj)
                state.prototypes.update(c, zj)
                state.counts[c] += 1
                if flags.mr:
                    state.buffer.observe(zj, c, quota, rng_buffer)

            logits = nn.forward_classifier(params, z)
            losses[0] += nn.weighted_cross_entropy(logits, y, weights)
            gf_cls, gc_cls = nn.backward(params, cache, nn.weighted_cross_entropy_grad(logits, y, weights))
            grad_c = gc_cls
            g_stab = GradientVector(Group.FEATURE_EXTRACTOR, np.zeros_like(gf_cls))

            if use_kd:
                t_logits = nn.forward(teacher, x)
                losses[1] += nn.kd_loss(logits, t_logits, config.tau)
                gf_kd, gc_kd = nn.backward(params, cache, nn.kd_loss_grad(logits, t_logits, config.tau))
                g_stab = GradientVector(Group.FEATURE_EXTRACTOR, lam.distill * gf_kd)
                grad_c = grad_c + lam.distill * gc_kd

            if flags.mr and lam.replay > 0 and len(state.buffer) > 0:
                batch = sample_replay(state.buffer, min(config.replay_batch_size, len(state.buffer)), rng_replay)
                zr, yr = batch
                if drift:
                    zr = zr + drift_for(drift, yr, zr.shape[1])
                r_logits = nn.forward_classifier(params, zr)
                losses[2] += nn.weighted_cross_entropy(r_logits, yr, np.ones(params.num_classes))
                dl = nn.weighted_cross_entropy_grad(r_logits, yr, np.ones(params.num_classes))
                grad_c = grad_c + lam.replay * nn.classifier_backward(zr, dl)

            g_plas = GradientVector(Group.FEATURE_EXTRACTOR, gf_cls)
            g_final = g_plas
            stab_sq = float(g_stab.values @ g_stab.values)
            if stab_sq > 0.0:
                dot = g_plas.dot(g_stab)
                trace.stab_steps += 1
                trace.cosines.append(dot / (np.sqrt(stab_sq) * max(g_plas.norm(), 1e-300)))
                if dot < 0.0:
                    trace.conflict_steps += 1
                if flags.gp:
                    g_final = project_gradient(g_plas, g_stab)
                    after = g_final.dot(g_stab)
                    growth = g_final.norm() - g_plas.norm()
                    trace.min_dot_after_projection = (
                        after if trace.min_dot_after_projection is None else min(trace.min_dot_after_projection, after))
                    trace.max_norm_growth = (
                        growth if trace.max_norm_growth is None else max(trace.max_norm_growth, growth))

            nn.optimizer_step(params, opt, g_final + g_stab, GradientVector(Group.CLASSIFIER, grad_c))
            trace.steps += 1

    trace.loss_cls, trace.loss_distill, trace.loss_replay = (float(v) for v in losses / max(trace.steps, 1))
    trace.samples_seen = int(state.counts.sum())
    trace.buffer_size = len(state.buffer)
    return ClientUpdate(params, state.prototypes.copy(), state.counts.copy()), trace
