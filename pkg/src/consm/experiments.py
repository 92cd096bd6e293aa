"""Experiment harnesses: edge F1, prune grid, confidence-ratio sweep, depth sweep, convergence curves.

All tables are lists of dicts with fixed keys; :func:`write_csv` serialises
them with a stable header order and ``repr``-style floats so output does not
depend on locale.
"""

from __future__ import annotations

import csv
import io
import math
import statistics
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import Config
from .errors import EvaluationError
from .graph import Graph, homophily_ratio, partition_edges
from .matcher import EdgeCoefficients, rank_edges, train_matcher
from .trainer import RunReport, matcher_schedule, run, run_gcn


@dataclass
class EdgeEvalResult:
    precision: float
    recall: float
    f1: float
    k: int
    scores: np.ndarray = field(repr=False)
    truth: np.ndarray = field(repr=False)


def f1_from_counts(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return p, r, f1


def edge_f1(coeffs: EdgeCoefficients | np.ndarray, graph: Graph) -> EdgeEvalResult:
    """Label the k highest-scoring edges positive, k being the number of same-label edges."""
    w = coeffs.aligned_to(graph.edges) if isinstance(coeffs, EdgeCoefficients) else np.asarray(coeffs, float)
    truth = graph.labels[graph.edges[:, 0]] == graph.labels[graph.edges[:, 1]]
    k = int(truth.sum())
    if k == 0:
        raise EvaluationError("no same-label edge; edge F1 is undefined")
    pred = np.zeros(truth.size, dtype=bool)
    pred[rank_edges(w)[:k]] = True
    tp = int((pred & truth).sum())
    fp = int((pred & ~truth).sum())
    fn = int((~pred & truth).sum())
    p, r, f1 = f1_from_counts(tp, fp, fn)
    return EdgeEvalResult(p, r, f1, k, w, truth)


# -- prune grid ------------------------------------------------------------


DEFAULT_PRUNE_GRID = (0.0, 0.25, 0.5, 0.75, 1.0)


def prune_edges(graph: Graph, assortative_frac: float, disassortative_frac: float, seed: int) -> Graph:
    """Randomly drop the given fractions of same-label and different-label edges."""
    rng = np.random.default_rng([seed, 0x9E])
    assort, disassort = partition_edges(graph)
    keep = []
    for idx, frac in ((assort, assortative_frac), (disassort, disassortative_frac)):
        n_drop = int(round(frac * idx.size))
        drop = rng.choice(idx, size=n_drop, replace=False) if n_drop else np.zeros(0, dtype=np.int64)
        keep.append(np.setdiff1d(idx, drop))
    return graph.with_edges(graph.edges[np.sort(np.concatenate(keep))])


def prune_sweep(graph: Graph, config: Config, seeds, grid=DEFAULT_PRUNE_GRID) -> list[dict]:
    """GCN test accuracy for every (assortative removed, disassortative removed) cell and seed."""
    rows = []
    for a in grid:
        for d in grid:
            for seed in seeds:
                if a == 0 and d == 0:
                    pruned = graph
                else:
                    pruned = prune_edges(graph, a, d, seed)
                res = run_gcn(pruned, config.replace(seed=seed))
                rows.append({"assortative_removed": float(a), "disassortative_removed": float(d), "seed": int(seed),
                             "n_edges": pruned.n_edges, "no_edges": pruned.n_edges == 0,
                             "test_acc": res.report.test_at_best})
    return rows


def cell_medians(rows: list[dict]) -> dict[tuple[float, float], float]:
    cells: dict[tuple[float, float], list[float]] = {}
    for row in rows:
        cells.setdefault((row["assortative_removed"], row["disassortative_removed"]), []).append(row["test_acc"])
    return {k: statistics.median(v) for k, v in cells.items()}


# -- confidence-ratio sweep ------------------------------------------------


def zeta_sweep(graph: Graph, config: Config, zetas, seeds, epochs: int | None = None) -> list[dict]:
    h = homophily_ratio(graph)
    rows = []
    for z in zetas:
        for seed in seeds:
            res = train_matcher(graph, config.replace(zeta=float(z), seed=seed), epochs=epochs)
            ev = edge_f1(res.coefficients, graph)
            rows.append({"zeta": float(z), "seed": int(seed), "f1": ev.f1, "precision": ev.precision,
                         "recall": ev.recall, "k": ev.k, "true_h": h})
    return rows


def best_zeta(rows: list[dict]) -> float:
    """zeta maximising the median F1 over seeds; ties go to the smallest zeta."""
    by: dict[float, list[float]] = {}
    for row in rows:
        by.setdefault(row["zeta"], []).append(row["f1"])
    med = sorted((z, statistics.median(v)) for z, v in by.items())
    return max(med, key=lambda t: (t[1], -t[0]))[0]


# -- depth sweep -----------------------------------------------------------


DEFAULT_DEPTHS = (1, 2, 4, 8, 16)


def depth_sweep(graph: Graph, config: Config, depths=DEFAULT_DEPTHS, seeds=(0,),
                methods=("gcn", "consm")) -> list[dict]:
    rows = []
    for seed in seeds:
        cfg = config.replace(seed=seed)
        schedule = matcher_schedule(graph, cfg) if "consm" in methods else None
        for depth in depths:
            for method in methods:
                c = cfg.replace(depth=depth)
                res = run(graph, c, schedule=schedule) if method == "consm" else run_gcn(graph, c)
                rows.append({"method": method, "depth": int(depth), "seed": int(seed),
                             "test_acc": res.report.test_at_best})
    return rows


def summarize(rows: list[dict], keys: tuple[str, ...], value: str = "test_acc") -> list[dict]:
    """Mean, sample sd and median of ``value`` grouped by ``keys``."""
    groups: dict[tuple, list[float]] = {}
    for row in rows:
        groups.setdefault(tuple(row[k] for k in keys), []).append(row[value])
    out = []
    for key in sorted(groups):
        vals = groups[key]
        sd = statistics.stdev(vals) if len(vals) > 1 else 0.0
        out.append({**dict(zip(keys, key)), "mean": statistics.fmean(vals), "sd": sd,
                    "median": statistics.median(vals), "n": len(vals)})
    return out


def depth_drops(rows: list[dict]) -> dict[str, float]:
    """Per method: median-over-seeds accuracy at its best depth minus at the deepest depth."""
    out = {}
    for method in sorted({r["method"] for r in rows}):
        stats = summarize([r for r in rows if r["method"] == method], ("depth",))
        med = {s["depth"]: s["median"] for s in stats}
        deepest = max(med)
        out[method] = max(med.values()) - med[deepest]
    return out


# -- convergence -----------------------------------------------------------


CONVERGENCE_HEADER = ("outer", "epoch", "val_acc", "test_acc", "champion_val")


def convergence_report(report: RunReport) -> list[dict]:
    rows, best = [], -math.inf
    for rec in report.epochs:
        best = max(best, rec.val_acc)
        rows.append({"outer": rec.outer, "epoch": rec.epoch, "val_acc": rec.val_acc,
                     "test_acc": rec.test_acc, "champion_val": best})
    return rows


# -- serialisation ---------------------------------------------------------


def _fmt(x) -> str:
    if isinstance(x, bool):
        return "true" if x else "false"
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def to_csv(rows: list[dict], header=None) -> str:
    if header is None:
        header = tuple(rows[0]) if rows else ()
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_fmt(row[h]) for h in header])
    return buf.getvalue()


def write_csv(rows: list[dict], path, header=None) -> Path:
    path = Path(path)
    path.write_text(to_csv(rows, header), encoding="utf-8", newline="")
    return path
