"""Two-group MLP (feature extractor + linear classifier) with analytic gradients.

Every loss term gets its own backward pass so callers can inspect and combine
per-term gradients on each parameter group before the optimizer sees them.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NumericalError


class Group(enum.Enum):
    FEATURE_EXTRACTOR = "feature_extractor"
    CLASSIFIER = "classifier"


@dataclass
class ModelParams:
    """Extractor layers as ``(W[out, in], b[out])`` pairs plus classifier ``(W[C, d], b[C])``.

    ReLU sits between extractor layers; the embedding output is linear.
    """

    layers: list[tuple[np.ndarray, np.ndarray]]
    W: np.ndarray
    b: np.ndarray

    def __post_init__(self) -> None:
        if not self.layers:
            raise ConfigError("feature extractor needs at least one layer")
        prev = None
        for k, (w, bias) in enumerate(self.layers):
            if w.ndim != 2 or bias.shape != (w.shape[0],):
                raise ConfigError(f"extractor layer {k} has inconsistent shapes {w.shape}/{bias.shape}")
            if prev is not None and w.shape[1] != prev:
                raise ConfigError(f"extractor layer {k} expects input {w.shape[1]}, previous layer gives {prev}")
            prev = w.shape[0]
        if self.W.shape != (self.b.shape[0], prev):
            raise ConfigError(f"classifier shape {self.W.shape} does not match embedding dim {prev}")

    @classmethod
    def init(cls, input_dim: int, hidden: list[int], num_classes: int, rng: np.random.Generator) -> ModelParams:
        """He-uniform extractor, small uniform classifier, zero biases."""
        sizes = [input_dim, *hidden]
        layers = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            bound = np.sqrt(6.0 / fan_in)
            layers.append((rng.uniform(-bound, bound, size=(fan_out, fan_in)), np.zeros(fan_out)))
        d = sizes[-1]
        bound = 1.0 / np.sqrt(d)
        return cls(layers, rng.uniform(-bound, bound, size=(num_classes, d)), np.zeros(num_classes))

    @property
    def input_dim(self) -> int:
        return self.layers[0][0].shape[1]

    @property
    def embed_dim(self) -> int:
        return self.W.shape[1]

    @property
    def num_classes(self) -> int:
        return self.W.shape[0]

    def copy(self) -> ModelParams:
        return ModelParams([(w.copy(), b.copy()) for w, b in self.layers], self.W.copy(), self.b.copy())

    def arrays(self, group: Group) -> list[np.ndarray]:
        if group is Group.FEATURE_EXTRACTOR:
            return [a for pair in self.layers for a in pair]
        return [self.W, self.b]

    def size(self, group: Group | None = None) -> int:
        if group is None:
            return self.size(Group.FEATURE_EXTRACTOR) + self.size(Group.CLASSIFIER)
        return sum(a.size for a in self.arrays(group))

    def flat(self, group: Group) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays(group)])

    def set_flat(self, group: Group, values: np.ndarray) -> None:
        values = np.asarray(values, dtype=float)
        if values.shape != (self.size(group),):
            raise ConfigError(f"flat vector of length {values.shape} does not fit group {group.value}")
        offset = 0
        for a in self.arrays(group):
            a[...] = values[offset : offset + a.size].reshape(a.shape)
            offset += a.size

    def is_finite(self) -> bool:
        return all(np.isfinite(a).all() for g in Group for a in self.arrays(g))

    def digest(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for g in Group:
            for a in self.arrays(g):
                h.update(np.ascontiguousarray(a, dtype=np.float64).tobytes())
        return h.hexdigest()


@dataclass
class GradientVector:
    group: Group
    values: np.ndarray

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=float)

    def dot(self, other: GradientVector) -> float:
        _check_congruent(self, other)
        return float(self.values @ other.values)

    def norm(self) -> float:
        return float(np.linalg.norm(self.values))

    def __add__(self, other: GradientVector) -> GradientVector:
        _check_congruent(self, other)
        return GradientVector(self.group, self.values + other.values)

    def __mul__(self, scale: float) -> GradientVector:
        return GradientVector(self.group, self.values * scale)

    __rmul__ = __mul__


def _check_congruent(a: GradientVector, b: GradientVector) -> None:
    if a.group is not b.group or a.values.shape != b.values.shape:
        raise ConfigError(f"gradient mismatch: {a.group.value}{a.values.shape} vs {b.group.value}{b.values.shape}")


# --------------------------------------------------------------------------
# forward passes


@dataclass
class ForwardCache:
    inputs: np.ndarray
    pre: list[np.ndarray]  # pre-activations per layer
    embeddings: np.ndarray


def forward_features(params: ModelParams, inputs: np.ndarray, *, cache: bool = False):
    x = np.asarray(inputs, dtype=float)
    if x.ndim != 2 or x.shape[0] < 1 or x.shape[1] != params.input_dim:
        raise ConfigError(f"input shape {x.shape} incompatible with extractor input dim {params.input_dim}")
    h = x
    pre = []
    last = len(params.layers) - 1
    for k, (w, b) in enumerate(params.layers):
        a = h @ w.T + b
        pre.append(a)
        h = np.maximum(a, 0.0) if k < last else a
    if cache:
        return h, ForwardCache(x, pre, h)
    return h


def forward_classifier(params: ModelParams, embeddings: np.ndarray) -> np.ndarray:
    z = np.asarray(embeddings, dtype=float)
    if z.ndim != 2 or z.shape[1] != params.embed_dim:
        raise ConfigError(f"embedding shape {z.shape} incompatible with classifier dim {params.embed_dim}")
    return z @ params.W.T + params.b


def forward(params: ModelParams, inputs: np.ndarray) -> np.ndarray:
    return forward_classifier(params, forward_features(params, inputs))


# --------------------------------------------------------------------------
# losses


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


def _check_labels(labels: np.ndarray, num_classes: int) -> np.ndarray:
    y = np.asarray(labels, dtype=np.int64)
    if y.size and (y.min() < 0 or y.max() >= num_classes):
        raise ConfigError(f"label out of range [0, {num_classes})")
    return y


def weighted_cross_entropy(logits: np.ndarray, labels: np.ndarray, class_weights: np.ndarray) -> float:
    """Mean over the batch of ``-w[y] * log p(y)``; normalised by batch size, not weight sum."""
    y = _check_labels(labels, logits.shape[1])
    logp = log_softmax(logits)
    w = np.asarray(class_weights, dtype=float)[y]
    return float(-(w * logp[np.arange(len(y)), y]).sum() / len(y))


def weighted_cross_entropy_grad(logits: np.ndarray, labels: np.ndarray, class_weights: np.ndarray) -> np.ndarray:
    y = _check_labels(labels, logits.shape[1])
    g = softmax(logits)
    g[np.arange(len(y)), y] -= 1.0
    w = np.asarray(class_weights, dtype=float)[y]
    return g * (w / len(y))[:, None]


def kd_loss(student_logits: np.ndarray, teacher_logits: np.ndarray, tau: float) -> float:
    """``tau**2`` times the batch-mean KL(teacher || student) of temperature-softened outputs."""
    if student_logits.shape != teacher_logits.shape:
        raise ConfigError(f"student {student_logits.shape} and teacher {teacher_logits.shape} logits differ in shape")
    log_q_t = log_softmax(teacher_logits / tau)
    log_q_s = log_softmax(student_logits / tau)
    kl = (np.exp(log_q_t) * (log_q_t - log_q_s)).sum(axis=1)
    # clamp tiny negative round-off; KL is nonnegative
    return float(tau * tau * max(kl.mean(), 0.0))


def kd_loss_grad(student_logits: np.ndarray, teacher_logits: np.ndarray, tau: float) -> np.ndarray:
    q_t = softmax(teacher_logits / tau)
    q_s = softmax(student_logits / tau)
    return (tau / student_logits.shape[0]) * (q_s - q_t)


# --------------------------------------------------------------------------
# per-term gradients


@dataclass
class ClsLoss:
    inputs: np.ndarray
    labels: np.ndarray
    class_weights: np.ndarray


@dataclass
class DistillLoss:
    inputs: np.ndarray
    teacher_logits: np.ndarray
    tau: float


@dataclass
class ReplayLoss:
    embeddings: np.ndarray
    labels: np.ndarray


LossSpec = ClsLoss | DistillLoss | ReplayLoss


def backward(params: ModelParams, cache: ForwardCache, dlogits: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Backpropagate ``dL/dlogits`` through classifier and extractor; returns flat (extractor, classifier) grads."""
    z = cache.embeddings
    gW = dlogits.T @ z
    gb = dlogits.sum(axis=0)
    dh = dlogits @ params.W
    grads: list[np.ndarray] = []
    last = len(params.layers) - 1
    for k in range(last, -1, -1):
        w, _ = params.layers[k]
        da = dh if k == last else dh * (cache.pre[k] > 0)
        h_in = cache.inputs if k == 0 else np.maximum(cache.pre[k - 1], 0.0)
        grads.append(da.sum(axis=0))
        grads.append(da.T @ h_in)
        if k:
            dh = da @ w
    grads.reverse()
    return np.concatenate([g.ravel() for g in grads]), np.concatenate([gW.ravel(), gb])


def classifier_backward(embeddings: np.ndarray, dlogits: np.ndarray) -> np.ndarray:
    return np.concatenate([(dlogits.T @ embeddings).ravel(), dlogits.sum(axis=0)])


def loss_value(params: ModelParams, spec: LossSpec) -> float:
    if isinstance(spec, ClsLoss):
        return weighted_cross_entropy(forward(params, spec.inputs), spec.labels, spec.class_weights)
    if isinstance(spec, DistillLoss):
        return kd_loss(forward(params, spec.inputs), spec.teacher_logits, spec.tau)
    if isinstance(spec, ReplayLoss):
        logits = forward_classifier(params, spec.embeddings)
        return weighted_cross_entropy(logits, spec.labels, np.ones(params.num_classes))
    raise ConfigError(f"invalid loss spec {type(spec).__name__}")


def loss_grads(params: ModelParams, spec: LossSpec) -> tuple[np.ndarray, np.ndarray]:
    """Gradient of one loss term w.r.t. both groups as flat (extractor, classifier) vectors."""
    if isinstance(spec, ReplayLoss):
        z = np.asarray(spec.embeddings, dtype=float)
        logits = forward_classifier(params, z)
        dl = weighted_cross_entropy_grad(logits, spec.labels, np.ones(params.num_classes))
        # replay acts at the classifier input: no path into the extractor
        return np.zeros(params.size(Group.FEATURE_EXTRACTOR)), classifier_backward(z, dl)
    if isinstance(spec, (ClsLoss, DistillLoss)):
        z, cache = forward_features(params, spec.inputs, cache=True)
        logits = forward_classifier(params, z)
        if isinstance(spec, ClsLoss):
            dl = weighted_cross_entropy_grad(logits, spec.labels, spec.class_weights)
        else:
            dl = kd_loss_grad(logits, spec.teacher_logits, spec.tau)
        return backward(params, cache, dl)
    raise ConfigError(f"invalid loss spec {type(spec).__name__}")


def grad(params: ModelParams, spec: LossSpec, group: Group) -> GradientVector:
    gf, gc = loss_grads(params, spec)
    return GradientVector(group, gf if group is Group.FEATURE_EXTRACTOR else gc)


# --------------------------------------------------------------------------
# optimizer


@dataclass
class OptimizerState:
    """Adam moments per group. ``use_moments=False`` gives plain SGD."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    use_moments: bool = True
    step: int = 0
    m: dict[Group, np.ndarray] = field(default_factory=dict)
    v: dict[Group, np.ndarray] = field(default_factory=dict)


def optimizer_step(params: ModelParams, state: OptimizerState, grad_f: GradientVector, grad_c: GradientVector) -> None:
    for g, expected in ((grad_f, Group.FEATURE_EXTRACTOR), (grad_c, Group.CLASSIFIER)):
        if g.group is not expected or g.values.shape != (params.size(expected),):
            raise ConfigError(f"gradient for {expected.value} is not congruent with parameters")
        if not np.isfinite(g.values).all():
            bad = int(np.flatnonzero(~np.isfinite(g.values))[0])
            raise NumericalError(f"non-finite gradient in {expected.value} at flat index {bad} (step {state.step})")
    state.step += 1
    t = state.step
    for g in (grad_f, grad_c):
        theta = params.flat(g.group)
        if state.use_moments:
            m = state.m.get(g.group, np.zeros_like(theta))
            v = state.v.get(g.group, np.zeros_like(theta))
            m = state.beta1 * m + (1.0 - state.beta1) * g.values
            v = state.beta2 * v + (1.0 - state.beta2) * g.values**2
            state.m[g.group], state.v[g.group] = m, v
            m_hat = m / (1.0 - state.beta1**t)
            v_hat = v / (1.0 - state.beta2**t)
            theta = theta - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
        else:
            theta = theta - state.lr * g.values
        params.set_flat(g.group, theta)
    if not params.is_finite():
        raise NumericalError(f"parameters became non-finite after step {t}")
