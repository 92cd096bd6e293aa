"""Alternating optimisation: matcher epochs, coefficient export, GNN epochs with best-validation checkpoints."""

from __future__ import annotations

import io
import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from .config import Config
from .errors import ConsmError, ContractError, EvaluationError
from .gnn import GcnParams, SupTerms, gcn_forward, total_loss
from .graph import Graph, homophily_ratio, normalized_adjacency
from .matcher import EdgeCoefficients, SubgraphMatcher
from .numerics import Adam, Tape

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"CONSMCKP"
CHECKPOINT_VERSION = 1


def evaluate(log_probs, labels: np.ndarray, mask: np.ndarray) -> float:
    """Accuracy of the row-wise argmax (lowest class index wins ties) over ``mask``."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise EvaluationError("accuracy over an empty mask")
    scores = log_probs.value if isinstance(log_probs, nx.Tensor) else np.asarray(log_probs)
    pred = np.argmax(scores[mask], axis=1)
    return float((pred == labels[mask]).mean())


@dataclass
class Checkpoint:
    arrays: list[np.ndarray]
    val_acc: float
    outer: int
    epoch: int
    rng_state: str = ""

    def save(self, path) -> Path:
        path = Path(path)
        buf = io.BytesIO()
        meta = json.dumps({"val_acc": self.val_acc, "outer": self.outer, "epoch": self.epoch,
                           "rng_state": self.rng_state, "n": len(self.arrays)}, sort_keys=True)
        np.savez(buf, meta=np.frombuffer(meta.encode(), dtype=np.uint8),
                 **{f"p{i}": a for i, a in enumerate(self.arrays)})
        path.write_bytes(CHECKPOINT_MAGIC + struct.pack("<I", CHECKPOINT_VERSION) + buf.getvalue())
        return path

    @classmethod
    def load(cls, path) -> "Checkpoint | None":
        """None when the file does not exist."""
        path = Path(path)
        if not path.exists():
            return None
        raw = path.read_bytes()
        if raw[:8] != CHECKPOINT_MAGIC:
            raise ContractError(f"{path} is not a checkpoint file")
        (version,) = struct.unpack("<I", raw[8:12])
        if version != CHECKPOINT_VERSION:
            raise ContractError(f"unsupported checkpoint version {version}")
        with np.load(io.BytesIO(raw[12:])) as data:
            meta = json.loads(bytes(data["meta"]).decode())
            arrays = [data[f"p{i}"].copy() for i in range(meta["n"])]
        return cls(arrays, meta["val_acc"], meta["outer"], meta["epoch"], meta["rng_state"])


class CheckpointStore:
    """Keeps the parameters with the highest validation accuracy seen so far (strict improvement)."""

    def __init__(self):
        self.best: Checkpoint | None = None

    @property
    def best_val(self) -> float:
        return 0.0 if self.best is None else self.best.val_acc

    def offer(self, params: GcnParams, val_acc: float, outer: int, epoch: int, rng_state: str = "") -> bool:
        if val_acc > self.best_val:
            self.best = Checkpoint(params.snapshot(), val_acc, outer, epoch, rng_state)
            return True
        return False

    def load_into(self, params: GcnParams) -> bool:
        if self.best is None:
            return False
        params.restore(self.best.arrays)
        return True


@dataclass
class EpochRecord:
    outer: int
    epoch: int
    loss: float
    loss_gnn: float
    loss_sup: float
    train_acc: float
    val_acc: float
    test_acc: float
    best_val: float
    saved: bool


@dataclass
class RunReport:
    method: str
    seed: int
    config: dict
    homophily: float
    epochs: list[EpochRecord] = field(default_factory=list)
    matcher_losses: list[list[float]] = field(default_factory=list)
    best_val: float = 0.0
    test_at_best: float = 0.0
    best_outer: int = -1
    best_epoch: int = -1

    def to_dict(self) -> dict:
        d = asdict(self)
        d["epochs"] = {k: [getattr(r, k) for r in self.epochs] for k in EpochRecord.__dataclass_fields__}
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(self.to_json(), encoding="utf-8")
        return path

    @classmethod
    def from_dict(cls, d: dict) -> "RunReport":
        d = dict(d)
        cols = d.pop("epochs")
        n = len(next(iter(cols.values()))) if cols else 0
        records = [EpochRecord(**{k: cols[k][i] for k in cols}) for i in range(n)]
        return cls(epochs=records, **d)

    @classmethod
    def load(cls, path) -> "RunReport":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


@dataclass
class RunResult:
    report: RunReport
    params: GcnParams
    coefficients: EdgeCoefficients | None
    checkpoint: Checkpoint | None


class StageError(ConsmError):
    def __init__(self, stage: str, outer: int, cause: Exception):
        self.stage, self.outer, self.cause = stage, outer, cause
        super().__init__(f"{stage} failed in outer iteration {outer}: {cause}")


def matcher_schedule(graph: Graph, config: Config) -> tuple[list[EdgeCoefficients], list[list[float]]]:
    """Coefficients exported after each outer iteration's matcher epochs.

    The matcher never reads GNN state, so this sequence depends only on the
    graph and the matcher settings and can be shared across GNN variants.
    """
    matcher = SubgraphMatcher(graph, config)
    coeffs, losses = [], []
    for outer in range(config.outer_epochs):
        try:
            stats = [matcher.train_epoch() for _ in range(config.matcher_epochs)]
            coeffs.append(matcher.export())
        except ConsmError as exc:
            raise StageError("matcher", outer, exc) from exc
        losses.append([s.loss for s in stats])
    return coeffs, losses


def _gnn_seed(seed: int) -> list[int]:
    return [seed, 0x6C]


def _gnn_optimizer(params: GcnParams, config: Config) -> Adam:
    return Adam(params.tensors(), lr=config.gnn_learning_rate, weight_decay=config.weight_decay,
                betas=(config.beta1, config.beta2), eps=config.adam_eps)


def _gnn_epoch(graph, a_hat, params, optimizer, terms, config, store, outer, epoch) -> EpochRecord:
    with Tape() as tape:
        out = gcn_forward(a_hat, graph.features, params)
        loss, base, sup = total_loss(out.log_probs, out.regularised(config.sup_on), graph.labels,
                                     graph.train_mask, terms, config.lam, config.sup_reduction)
    # score the parameters that produced this forward pass, before they move
    val = evaluate(out.log_probs, graph.labels, graph.val_mask)
    saved = store.offer(params, val, outer, epoch)
    optimizer.step(tape.gradient(loss, params.tensors()))
    return EpochRecord(outer, epoch, loss.item(), base.item(), 0.0 if sup is None else sup.item(),
                       evaluate(out.log_probs, graph.labels, graph.train_mask), val,
                       evaluate(out.log_probs, graph.labels, graph.test_mask), store.best_val, saved)


def _finish(report: RunReport, graph: Graph, a_hat, params: GcnParams, store: CheckpointStore) -> None:
    if store.best is None:
        return
    probe = GcnParams([nx.parameter(a) for a in store.best.arrays[:params.depth]],
                      [nx.parameter(a) for a in store.best.arrays[params.depth:]])
    lp = gcn_forward(a_hat, graph.features, probe).log_probs
    report.best_val = store.best.val_acc
    report.test_at_best = evaluate(lp, graph.labels, graph.test_mask)
    report.best_outer = store.best.outer
    report.best_epoch = store.best.epoch


def run(graph: Graph, config: Config, schedule: tuple[list[EdgeCoefficients], list[list[float]]] | None = None
        ) -> RunResult:
    """Full two-phase training. ``schedule`` may supply precomputed matcher output (see :func:`matcher_schedule`)."""
    a_hat = normalized_adjacency(graph)
    params = GcnParams.init(graph.n_features, graph.n_classes, config.hidden, config.depth, seed=_gnn_seed(config.seed))
    optimizer = _gnn_optimizer(params, config)
    store = CheckpointStore()
    report = RunReport("consm", config.seed, config.to_dict(),
                       homophily_ratio(graph) if graph.n_edges else float("nan"))

    matcher = None
    if schedule is None:
        matcher = SubgraphMatcher(graph, config)
    coeffs = None
    for outer in range(config.outer_epochs):
        if matcher is not None:
            try:
                stats = [matcher.train_epoch() for _ in range(config.matcher_epochs)]
                coeffs = matcher.export()
            except ConsmError as exc:
                raise StageError("matcher", outer, exc) from exc
            report.matcher_losses.append([s.loss for s in stats])
        else:
            coeffs = schedule[0][outer]
            report.matcher_losses.append(list(schedule[1][outer]))
        terms = None
        if config.lam > 0 and graph.n_edges:
            terms = SupTerms.build(graph.edges, coeffs.aligned_to(graph.edges), graph.split, config.zeta,
                                   config.alpha1, config.alpha2)
        try:
            for epoch in range(config.gnn_epochs):
                report.epochs.append(_gnn_epoch(graph, a_hat, params, optimizer, terms, config, store, outer, epoch))
        except ConsmError as exc:
            raise StageError("gnn", outer, exc) from exc
        store.load_into(params)
        log.info("outer %d: best val %.4f", outer, store.best_val)
    _finish(report, graph, a_hat, params, store)
    return RunResult(report, params, coeffs, store.best)


def run_gcn(graph: Graph, config: Config) -> RunResult:
    """Plain GCN baseline: outer_epochs * gnn_epochs continuous epochs, test accuracy at best validation."""
    a_hat = normalized_adjacency(graph)
    params = GcnParams.init(graph.n_features, graph.n_classes, config.hidden, config.depth, seed=_gnn_seed(config.seed))
    optimizer = _gnn_optimizer(params, config)
    store = CheckpointStore()
    report = RunReport("gcn", config.seed, config.to_dict(),
                       homophily_ratio(graph) if graph.n_edges else float("nan"))
    per = max(config.gnn_epochs, 1)
    for step in range(config.outer_epochs * config.gnn_epochs):
        report.epochs.append(_gnn_epoch(graph, a_hat, params, optimizer, None, config, store, step // per, step % per))
    _finish(report, graph, a_hat, params, store)
    return RunResult(report, params, None, store.best)
