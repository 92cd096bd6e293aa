"""Run configuration shared by the matcher, the GNN trainer and the CLI."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigError


@dataclass
class Config:
    # confidence ratio: fraction of edges trusted by pruning and by the LP threshold
    zeta: float = 0.8
    lam: float = 0.05
    alpha1: float = 1.0
    alpha2: float = 0.5
    sup_reduction: str = "sum"  # or "mean" over included edges
    sup_on: str = "preactivation"  # last hidden layer before ReLU, or "activation" after it
    depth: int = 2
    hidden: int = 64

    outer_epochs: int = 10
    matcher_epochs: int = 20
    gnn_epochs: int = 50

    lr: float = 1e-3
    gnn_lr: float | None = None
    weight_decay: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    subgraph_cap: int = 128
    pairs_per_epoch: int | None = None  # None: 4 x number of training nodes
    batch_size: int = 32
    head: str = "subgraph"  # or "gam"
    projection: str = "monge"  # or "linear"
    sinkhorn_eps: float = 0.1
    sinkhorn_iters: int = 50
    sinkhorn_tol: float = 1e-6

    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not 0.0 <= self.zeta <= 1.0:
            raise ConfigError(f"zeta must lie in [0, 1], got {self.zeta}")
        if self.lam < 0:
            raise ConfigError("lambda must be non-negative")
        if self.depth < 1:
            raise ConfigError("depth must be at least 1")
        for name in ("outer_epochs", "hidden", "subgraph_cap", "batch_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be at least 1")
        for name in ("matcher_epochs", "gnn_epochs"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if self.batch_size % 2:
            raise ConfigError("batch_size must be even (balanced positive/negative pairs)")
        if self.pairs_per_epoch is not None and (self.pairs_per_epoch < 2 or self.pairs_per_epoch % 2):
            raise ConfigError("pairs_per_epoch must be an even number >= 2")
        if self.head not in ("subgraph", "gam"):
            raise ConfigError(f"unknown head {self.head!r}")
        if self.projection not in ("monge", "linear"):
            raise ConfigError(f"unknown projection {self.projection!r}")
        if self.sup_reduction not in ("sum", "mean"):
            raise ConfigError(f"unknown sup_reduction {self.sup_reduction!r}")
        if self.sup_on not in ("activation", "preactivation"):
            raise ConfigError(f"unknown sup_on {self.sup_on!r}")
        if self.lr <= 0 or (self.gnn_lr is not None and self.gnn_lr <= 0):
            raise ConfigError("learning rates must be positive")

    @property
    def gnn_learning_rate(self) -> float:
        return self.lr if self.gnn_lr is None else self.gnn_lr

    def replace(self, **changes) -> "Config":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "Config":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def from_json(cls, path) -> "Config":
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a JSON object")
        return cls.from_dict(data)
