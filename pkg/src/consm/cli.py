"""Command-line entry point: ``consm <command> [flags]``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

from .config import Config
from .errors import ConfigError, ConsmError, DataError, NumericalError
from .experiments import (
    CONVERGENCE_HEADER, DEFAULT_DEPTHS, DEFAULT_PRUNE_GRID, best_zeta, cell_medians, convergence_report,
    depth_drops, depth_sweep, edge_f1, prune_sweep, summarize, to_csv, write_csv, zeta_sweep,
)
from .graph import Graph, generate_synthetic, homophily_ratio, load_bundle, save_bundle
from .matcher import EdgeCoefficients
from .trainer import RunReport, StageError, run, run_gcn

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

SYNTH_KEYS = {"n_nodes": int, "n_classes": int, "n_features": int, "avg_degree": float,
              "homophily": float, "noise": float, "graph_seed": int}
SYNTH_DEFAULTS = {"n_nodes": 2000, "n_classes": 5, "n_features": 32, "avg_degree": 5.0,
                  "homophily": 0.8, "noise": 0.5, "graph_seed": 0}
CONFIG_FLAGS = {"zeta": "zeta", "lambda": "lam", "depth": "depth", "outer_epochs": "outer_epochs",
                "matcher_epochs": "matcher_epochs", "gnn_epochs": "gnn_epochs", "lr": "lr", "head": "head",
                "projection": "projection", "subgraph_cap": "subgraph_cap"}


def _float_list(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def parse_seeds(text: str) -> list[int]:
    """'0,1,2' or '0-4'."""
    out = []
    try:
        for part in text.split(","):
            part = part.strip()
            if not part:
                continue
            if "-" in part[1:]:
                lo, hi = part.split("-", 1)
                out.extend(range(int(lo), int(hi) + 1))
            else:
                out.append(int(part))
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad seed list {text!r}") from None
    return out


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file mirroring these flags; flags take precedence")
    common.add_argument("--bundle", help="graph bundle directory")
    common.add_argument("--synthetic", action="store_true", default=None, help="generate the graph instead")
    common.add_argument("--n-nodes", dest="n_nodes", type=int)
    common.add_argument("--n-classes", dest="n_classes", type=int)
    common.add_argument("--n-features", dest="n_features", type=int)
    common.add_argument("--avg-degree", dest="avg_degree", type=float)
    common.add_argument("--homophily", type=float)
    common.add_argument("--noise", type=float)
    common.add_argument("--graph-seed", dest="graph_seed", type=int)
    common.add_argument("--zeta", type=float)
    common.add_argument("--lambda", dest="lambda", type=float)
    common.add_argument("--depth", type=int)
    common.add_argument("--outer-epochs", dest="outer_epochs", type=int)
    common.add_argument("--matcher-epochs", dest="matcher_epochs", type=int)
    common.add_argument("--gnn-epochs", dest="gnn_epochs", type=int)
    common.add_argument("--lr", type=float)
    common.add_argument("--head", choices=("subgraph", "gam"))
    common.add_argument("--projection", choices=("monge", "linear"))
    common.add_argument("--subgraph-cap", dest="subgraph_cap", type=int)
    common.add_argument("--seeds", type=parse_seeds)
    common.add_argument("--out")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="consm", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("generate", parents=[common], help="write a synthetic graph bundle")
    sub.add_parser("train", parents=[common], help="two-phase training; writes report.json and coeffs.tsv")
    sub.add_parser("baseline-gcn", parents=[common], help="plain GCN with best-validation selection")
    p = sub.add_parser("eval-edges", parents=[common], help="edge F1 of a coefficient file")
    p.add_argument("--coeffs", required=False)
    p = sub.add_parser("prune-sweep", parents=[common], help="GCN accuracy under oracle edge pruning")
    p.add_argument("--grid", type=_float_list)
    p = sub.add_parser("zeta-sweep", parents=[common], help="edge F1 across confidence ratios")
    p.add_argument("--zetas", type=_float_list)
    p = sub.add_parser("depth-sweep", parents=[common], help="accuracy against depth for GCN and ConSM")
    p.add_argument("--depths", type=lambda s: [int(x) for x in _float_list(s)])
    p = sub.add_parser("convergence", parents=[common], help="per-epoch curve CSV from a report.json")
    p.add_argument("--report")
    return parser


def resolve(args: argparse.Namespace) -> dict:
    """Merge the JSON config (if any) with explicit flags."""
    settings: dict = {}
    if args.config:
        try:
            settings = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(settings, dict):
            raise ConfigError("config file must hold a JSON object")
    for key, value in vars(args).items():
        if key in ("config", "command", "verbose") or value is None:
            continue
        settings[key] = value
    return settings


def make_config(settings: dict, seed: int = 0) -> Config:
    fields = {}
    for flag, name in CONFIG_FLAGS.items():
        if flag in settings:
            fields[name] = settings[flag]
        elif name in settings:
            fields[name] = settings[name]
    # remaining Config fields can only come from the JSON file
    for name in Config.__dataclass_fields__:
        if name in settings and name not in fields and name != "seed":
            fields[name] = settings[name]
    fields["seed"] = seed
    return Config.from_dict(fields)


def load_graph(settings: dict) -> Graph:
    synthetic = settings.get("synthetic")
    has_synth = bool(synthetic) or any(k in settings for k in SYNTH_KEYS)
    if settings.get("bundle") and has_synth:
        raise ConfigError("give either --bundle or synthetic parameters, not both")
    if settings.get("bundle"):
        return load_bundle(settings["bundle"])
    if not has_synth:
        raise ConfigError("no data source: pass --bundle or --synthetic")
    params = dict(SYNTH_DEFAULTS)
    if isinstance(synthetic, dict):
        params.update(synthetic)
    for key, cast in SYNTH_KEYS.items():
        if key in settings:
            params[key] = cast(settings[key])
    return generate_synthetic(params["n_nodes"], params["n_classes"], params["n_features"], params["avg_degree"],
                              params["homophily"], params["noise"], seed=params["graph_seed"])


def _out_dir(settings: dict) -> Path:
    out = Path(settings.get("out") or "out")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _seeds(settings: dict) -> list[int]:
    seeds = settings.get("seeds", [0])
    if isinstance(seeds, str):
        seeds = parse_seeds(seeds)
    if not seeds:
        raise ConfigError("seed list is empty")
    return [int(s) for s in seeds]


def _write_json(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def cmd_generate(settings: dict) -> None:
    if "bundle" in settings:
        raise ConfigError("generate does not read a bundle")
    settings.setdefault("synthetic", True)
    graph = load_graph(settings)
    out = save_bundle(graph, _out_dir(settings))
    print(f"wrote {out} (N={graph.n_nodes}, M={graph.n_edges}, h={homophily_ratio(graph):.4f})")


def _train_like(settings: dict, method: str) -> None:
    graph = load_graph(settings)
    out = _out_dir(settings)
    seeds = _seeds(settings)
    for seed in seeds:
        target = out if len(seeds) == 1 else out / f"seed_{seed}"
        target.mkdir(parents=True, exist_ok=True)
        config = make_config(settings, seed)
        start = time.perf_counter()
        result = run(graph, config) if method == "consm" else run_gcn(graph, config)
        elapsed = time.perf_counter() - start
        result.report.save(target / "report.json")
        if result.coefficients is not None:
            result.coefficients.save(target / "coeffs.tsv")
        if result.checkpoint is not None:
            result.checkpoint.save(target / "checkpoint.bin")
        # kept apart from report.json so identical runs give identical reports
        _write_json(target / "timing.json", {"seed": seed, "wall_time_s": elapsed})
        rep = result.report
        print(f"{method} seed={seed}: test={rep.test_at_best:.4f} val={rep.best_val:.4f} -> {target}")


def cmd_eval_edges(settings: dict) -> None:
    graph = load_graph(settings)
    if not settings.get("coeffs"):
        raise ConfigError("eval-edges needs --coeffs")
    coeffs = EdgeCoefficients.load(settings["coeffs"])
    res = edge_f1(coeffs, graph)
    out = _out_dir(settings)
    _write_json(out / "edge_eval.json", {"precision": res.precision, "recall": res.recall, "f1": res.f1, "k": res.k})
    rows = [{"u": int(u), "v": int(v), "score": float(s), "truth": bool(t)}
            for (u, v), s, t in zip(graph.edges, res.scores, res.truth)]
    write_csv(rows, out / "edge_scores.csv", ("u", "v", "score", "truth"))
    print(f"P={res.precision:.4f} R={res.recall:.4f} F1={res.f1:.4f} k={res.k}")


def cmd_prune_sweep(settings: dict) -> None:
    graph = load_graph(settings)
    grid = settings.get("grid") or list(DEFAULT_PRUNE_GRID)
    rows = prune_sweep(graph, make_config(settings), _seeds(settings), grid)
    out = _out_dir(settings)
    write_csv(rows, out / "prune_sweep.csv")
    med = cell_medians(rows)
    matrix = [{"assortative_removed": a, **{f"d{d:g}": med[(a, d)] for d in grid}} for a in grid]
    write_csv(matrix, out / "prune_matrix.csv")
    print(to_csv(matrix), end="")


def cmd_zeta_sweep(settings: dict) -> None:
    graph = load_graph(settings)
    zetas = settings.get("zetas") or [round(0.1 * i, 1) for i in range(11)]
    rows = zeta_sweep(graph, make_config(settings), zetas, _seeds(settings))
    out = _out_dir(settings)
    write_csv(rows, out / "zeta_sweep.csv")
    summary = summarize(rows, ("zeta",), value="f1")
    write_csv(summary, out / "zeta_summary.csv")
    print(to_csv(summary), end="")
    print(f"true h={homophily_ratio(graph):.4f} best zeta={best_zeta(rows)}")


def cmd_depth_sweep(settings: dict) -> None:
    graph = load_graph(settings)
    depths = settings.get("depths") or list(DEFAULT_DEPTHS)
    rows = depth_sweep(graph, make_config(settings), depths, _seeds(settings))
    out = _out_dir(settings)
    write_csv(rows, out / "depth_sweep.csv")
    summary = summarize(rows, ("method", "depth"))
    write_csv(summary, out / "depth_summary.csv")
    print(to_csv(summary), end="")
    print("drop from best to deepest:", {k: round(v, 4) for k, v in depth_drops(rows).items()})


def cmd_convergence(settings: dict) -> None:
    if not settings.get("report"):
        raise ConfigError("convergence needs --report")
    try:
        report = RunReport.load(settings["report"])
    except (OSError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise DataError(f"cannot read report {settings['report']}: {exc}") from None
    out = _out_dir(settings)
    write_csv(convergence_report(report), out / "convergence.csv", CONVERGENCE_HEADER)
    print(f"wrote {out / 'convergence.csv'}")


COMMANDS = {
    "generate": cmd_generate,
    "train": lambda s: _train_like(s, "consm"),
    "baseline-gcn": lambda s: _train_like(s, "gcn"),
    "eval-edges": cmd_eval_edges,
    "prune-sweep": cmd_prune_sweep,
    "zeta-sweep": cmd_zeta_sweep,
    "depth-sweep": cmd_depth_sweep,
    "convergence": cmd_convergence,
}


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, StageError):
        exc = exc.cause
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, NumericalError):
        return EXIT_NUMERIC
    if isinstance(exc, (DataError, OSError)):
        return EXIT_DATA
    return EXIT_DATA


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        COMMANDS[args.command](resolve(args))
    except (ConsmError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exit_code_for(exc)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
