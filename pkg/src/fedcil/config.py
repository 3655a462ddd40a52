"""Experiment configuration: defaults, validation, TOML loading and ``key=value`` overrides."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .errors import ConfigError

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


MECHANISMS = ("cw", "kd", "mr", "ca", "ab", "dc", "gp")


@dataclass(frozen=True)
class Mechanisms:
    """On/off switches: class weights, distillation, memory replay, class-aware
    aggregation, adaptive balancing, drift compensation, gradient projection."""

    cw: bool = True
    kd: bool = True
    mr: bool = True
    ca: bool = True
    ab: bool = True
    dc: bool = True
    gp: bool = True

    @classmethod
    def only(cls, *names: str) -> Mechanisms:
        unknown = set(names) - set(MECHANISMS)
        if unknown:
            raise ConfigError(f"unknown mechanisms {sorted(unknown)}")
        return cls(**{m: m in names for m in MECHANISMS})

    @classmethod
    def none(cls) -> Mechanisms:
        return cls.only()

    def enabled(self) -> list[str]:
        return [m for m in MECHANISMS if getattr(self, m)]

    def label(self) -> str:
        on = self.enabled()
        if not on:
            return "FedAvg (none)"
        if len(on) == len(MECHANISMS):
            return "Full (all)"
        return "+" + "+".join(m.upper() for m in on)


@dataclass(frozen=True)
class ExperimentConfig:
    # federation / protocol
    num_clients: int = 5
    num_tasks: int = 3
    global_rounds: int = 5
    local_epochs: int = 5
    dirichlet_alpha: float = 0.5
    # optimisation
    lr: float = 1e-3
    batch_size: int = 64
    replay_batch_size: int = 32
    # loss weights
    tau: float = 2.0
    beta: float = 1.5
    gamma: float = 2.0
    lambda_distill: float = 0.5
    lambda_replay: float = 0.3
    lambda_distill_max: float = 1.5
    lambda_replay_max: float = 1.0
    memory_budget: int = 1000
    # model
    hidden: tuple[int, ...] = (32, 32)
    # data
    num_classes: int = 12
    per_class: int = 150
    input_dim: int = 16
    cluster_spread: float = 0.8
    class_separation: float = 1.0
    train_file: str | None = None
    test_file: str | None = None
    schedule: tuple[tuple[int, ...], ...] | None = None
    # experiment
    seed: int = 0
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    eval_every_round: bool = False
    methods: Mechanisms = field(default_factory=Mechanisms)

    def __post_init__(self) -> None:
        positive_int = ("num_clients", "num_tasks", "global_rounds", "local_epochs", "batch_size",
                        "replay_batch_size", "memory_budget", "num_classes", "per_class", "input_dim")
        for name in positive_int:
            v = getattr(self, name)
            if not isinstance(v, int) or isinstance(v, bool) or v < 1:
                raise ConfigError(f"{name}: expected a positive integer, got {v!r}")
        for name in ("dirichlet_alpha", "lr", "tau", "lambda_distill_max", "lambda_replay_max"):
            if not _number(getattr(self, name)) or getattr(self, name) <= 0:
                raise ConfigError(f"{name}: expected a positive number, got {getattr(self, name)!r}")
        for name in ("gamma", "lambda_distill", "lambda_replay", "cluster_spread", "class_separation"):
            if not _number(getattr(self, name)) or getattr(self, name) < 0:
                raise ConfigError(f"{name}: expected a nonnegative number, got {getattr(self, name)!r}")
        if not _number(self.beta) or self.beta <= 1:
            raise ConfigError(f"beta: boosting factor must exceed 1, got {self.beta!r}")
        if not self.hidden or any(not isinstance(h, int) or h < 1 for h in self.hidden):
            raise ConfigError(f"hidden: expected positive layer sizes, got {self.hidden!r}")
        if self.num_classes < 2:
            raise ConfigError("num_classes: need at least 2 classes")
        if self.num_tasks > self.num_classes:
            raise ConfigError(f"num_tasks: {self.num_tasks} tasks exceed {self.num_classes} classes")
        if (self.train_file is None) != (self.test_file is None):
            raise ConfigError("train_file/test_file: give both or neither")
        if not self.seeds:
            raise ConfigError("seeds: need at least one seed")

    @property
    def embed_dim(self) -> int:
        return self.hidden[-1]

    def replace(self, **changes: Any) -> ExperimentConfig:
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        out = dataclasses.asdict(self)
        out["hidden"] = list(self.hidden)
        out["seeds"] = list(self.seeds)
        out["schedule"] = None if self.schedule is None else [list(cs) for cs in self.schedule]
        return out

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:12]

    @classmethod
    def from_dict(cls, raw: dict[str, Any]) -> ExperimentConfig:
        raw = dict(raw)
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(raw) - names
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
        methods = raw.pop("methods", {})
        if isinstance(methods, Mechanisms):
            mech = methods
        else:
            if not isinstance(methods, dict):
                raise ConfigError("methods: expected a table of mechanism flags")
            bad = set(methods) - set(MECHANISMS)
            if bad:
                raise ConfigError(f"methods: unknown mechanisms {sorted(bad)}")
            for k, v in methods.items():
                if not isinstance(v, bool):
                    raise ConfigError(f"methods.{k}: expected true/false, got {v!r}")
            mech = Mechanisms(**methods)
        for key in ("hidden", "seeds"):
            if key in raw:
                raw[key] = _int_tuple(key, raw[key])
        if raw.get("schedule") is not None:
            raw["schedule"] = tuple(_int_tuple("schedule", cs) for cs in raw["schedule"])
        for key in ("lr", "tau", "beta", "gamma", "dirichlet_alpha", "lambda_distill", "lambda_replay",
                    "lambda_distill_max", "lambda_replay_max", "cluster_spread", "class_separation"):
            if key in raw and isinstance(raw[key], int) and not isinstance(raw[key], bool):
                raw[key] = float(raw[key])
        return cls(methods=mech, **raw)


def _number(v: Any) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def _int_tuple(name: str, value: Any) -> tuple[int, ...]:
    if isinstance(value, int) and not isinstance(value, bool):
        return (value,)
    try:
        out = tuple(value)
    except TypeError:
        raise ConfigError(f"{name}: expected a list of integers, got {value!r}") from None
    if any(not isinstance(v, int) or isinstance(v, bool) for v in out):
        raise ConfigError(f"{name}: expected a list of integers, got {value!r}")
    return out


def parse_value(text: str) -> Any:
    """Interpret an override value as a TOML scalar/array, else as a bare string."""
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def apply_overrides(raw: dict[str, Any], overrides: list[str]) -> dict[str, Any]:
    raw = json.loads(json.dumps(raw))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not KEY=VALUE")
        key, text = item.split("=", 1)
        parts = key.strip().split(".")
        node = raw
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r}: {p} is not a table")
        node[parts[-1]] = parse_value(text.strip())
    return raw


def load_config(path: str | Path | None, overrides: list[str] | None = None) -> ExperimentConfig:
    raw: dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            raw = tomllib.loads(path.read_text(encoding="utf-8"))
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    raw = apply_overrides(raw, overrides or [])
    try:
        return ExperimentConfig.from_dict(raw)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
