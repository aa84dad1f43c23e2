"""Experiment configuration: strict JSON loading, validation and echo."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .exceptions import ConfigError
from .protocol import RULES

SCHEMA_VERSION = 1


@dataclass
class TopologyConfig:
    kind: str = "full"
    n: int = 5
    path: str | None = None


@dataclass
class DatasetConfig:
    source: str = "synthetic"
    n_classes: int = 2
    dim: int = 10
    n_samples: int = 1000
    separation: float = 4.0
    path: str | None = None
    label_column: str = "label"
    normalize: bool = False
    test_fraction: float = 0.2


@dataclass
class PartitionConfig:
    kind: str = "iid"
    alpha: float = 0.1
    k: int = 2


@dataclass
class ModelConfig:
    kind: str = "logreg"
    hidden: int = 0


@dataclass
class PrivacyConfig:
    # None: estimate per-client sensitivity from the initial weights
    delta_f: float | list | None = None


@dataclass
class AttackSection:
    iterations: int = 300
    step_size: float = 1.0
    restarts: int = 5
    target_round: int = 0
    victim: int = 0
    batch_size: int = 1
    normalize: bool = True


@dataclass
class ExperimentConfig:
    schema_version: int = SCHEMA_VERSION
    topology: TopologyConfig = field(default_factory=TopologyConfig)
    rules: list = field(default_factory=lambda: ["dsgt", "dp", "lppa"])
    beta: float | list = 0.025
    model: ModelConfig = field(default_factory=ModelConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    partition: PartitionConfig = field(default_factory=PartitionConfig)
    lam: float = 0.05
    rounds: int = 50
    local_epochs: int = 1
    batch_size: int = 256
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    inject_each_round: bool = False
    privacy: PrivacyConfig = field(default_factory=PrivacyConfig)
    attack: AttackSection = field(default_factory=AttackSection)
    output_dir: str = "results"

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def validate(self) -> "ExperimentConfig":
        problems = []
        if self.schema_version != SCHEMA_VERSION:
            problems.append(f"schema_version must be {SCHEMA_VERSION}")
        if self.topology.kind not in ("full", "ring", "custom"):
            problems.append(f"topology.kind {self.topology.kind!r} not in full|ring|custom")
        if self.topology.kind == "custom" and not self.topology.path:
            problems.append("custom topology needs topology.path")
        if self.topology.kind != "custom" and self.topology.n < 2:
            problems.append("topology.n must be >= 2")
        if not self.rules or any(r not in RULES for r in self.rules):
            problems.append(f"rules must be a non-empty subset of {RULES}")
        betas = self.beta if isinstance(self.beta, list) else [self.beta]
        if not betas or any(not isinstance(b, (int, float)) or b <= 0 for b in betas):
            problems.append("beta must be positive")
        if self.model.kind not in ("logreg", "mlp"):
            problems.append("model.kind must be logreg or mlp")
        if self.model.kind == "mlp" and self.model.hidden < 1:
            problems.append("model.hidden must be >= 1 for mlp")
        if self.dataset.source not in ("synthetic", "csv"):
            problems.append("dataset.source must be synthetic or csv")
        if self.dataset.source == "csv" and not self.dataset.path:
            problems.append("csv dataset needs dataset.path")
        if not 0 < self.dataset.test_fraction < 1:
            problems.append("dataset.test_fraction must lie in (0, 1)")
        if self.partition.kind not in ("iid", "quantity_skew", "label_skew_dirichlet", "label_skew_count"):
            problems.append(f"unknown partition.kind {self.partition.kind!r}")
        if self.partition.alpha <= 0 or self.partition.k < 1:
            problems.append("partition.alpha must be > 0 and partition.k >= 1")
        if self.lam <= 0:
            problems.append("lam must be positive")
        if self.rounds < 0 or self.local_epochs < 1 or self.batch_size < 1:
            problems.append("rounds >= 0, local_epochs >= 1, batch_size >= 1 required")
        if not self.seeds or any(not isinstance(s, int) or s < 0 for s in self.seeds):
            problems.append("seeds must be a non-empty list of non-negative ints")
        a = self.attack
        if a.iterations < 0 or a.step_size <= 0 or a.restarts < 1 or a.target_round < 0 or a.batch_size < 1:
            problems.append("attack section out of range")
        if problems:
            raise ConfigError("; ".join(problems))
        return self


def _build(cls, payload, where: str):
    if not isinstance(payload, dict):
        raise ConfigError(f"{where or 'config'} must be a JSON object")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(payload) - set(known))
    if unknown:
        raise ConfigError(f"unknown key(s) in {where or 'config'}: {', '.join(unknown)}")
    kwargs = {}
    for name, value in payload.items():
        default = known[name].default_factory() if known[name].default_factory is not dataclasses.MISSING else None
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value, f"{where}.{name}".lstrip("."))
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def config_from_dict(payload: dict) -> ExperimentConfig:
    cfg = _build(ExperimentConfig, payload, "")
    try:
        return cfg.validate()
    except TypeError as exc:
        raise ConfigError(f"wrongly typed config value: {exc}") from exc


def load_config(path) -> ExperimentConfig:
    text = Path(path).read_text(encoding="utf-8")
    try:
        payload = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path} is not valid JSON: {exc}") from exc
    return config_from_dict(payload)


def parse_number_list(text: str, kind=float) -> list:
    try:
        values = [kind(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigError(f"cannot parse list {text!r}: {exc}") from exc
    if not values:
        raise ConfigError(f"empty list {text!r}")
    return values

