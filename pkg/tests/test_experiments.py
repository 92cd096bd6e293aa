import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from consm import cli
from consm.config import Config
from consm.errors import EvaluationError
from consm.experiments import (
    CONVERGENCE_HEADER, best_zeta, cell_medians, convergence_report, depth_drops, edge_f1, f1_from_counts,
    prune_edges, prune_sweep, summarize, to_csv, zeta_sweep,
)
from consm.graph import Graph, canonical_edges, generate_synthetic, homophily_ratio, partition_edges
from consm.matcher import EdgeCoefficients
from consm.trainer import RunReport, run, run_gcn

FAST = dict(outer_epochs=2, matcher_epochs=1, gnn_epochs=5, hidden=8)


def random_graph(seed, max_edges=50):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(3, 15))
    labels = rng.integers(0, 3, n)
    edges = canonical_edges(rng.integers(0, n, size=(int(rng.integers(1, max_edges + 1)), 2)), n)
    return Graph(np.zeros((n, 1)), labels, edges, np.zeros(n, int), 3)


def confusion_oracle(scores, truth):
    """Exhaustive count: predicted positive iff fewer than k edges outrank it (score desc, index asc)."""
    k = sum(truth)
    tp = fp = fn = 0
    for i, (s, t) in enumerate(zip(scores, truth)):
        better = sum(1 for j, s2 in enumerate(scores) if s2 > s or (s2 == s and j < i))
        pred = better < k
        tp += pred and t
        fp += pred and not t
        fn += (not pred) and t
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    return 2 * p * r / (p + r) if p + r else 0.0


@pytest.fixture(scope="module")
def small():
    return generate_synthetic(250, 5, 8, 4, 0.7, 0.8, seed=0)


class TestEdgeF1:
    def test_perfect_ranking(self, small):
        truth = small.labels[small.edges[:, 0]] == small.labels[small.edges[:, 1]]
        assert edge_f1(truth.astype(float), small).f1 == 1.0

    def test_closed_form_counts(self):
        assert f1_from_counts(2, 1, 1) == pytest.approx((2 / 3, 2 / 3, 2 / 3))
        assert f1_from_counts(0, 0, 3) == (0.0, 0.0, 0.0)

    def test_no_positive_edges(self):
        g = Graph(np.zeros((2, 1)), np.array([0, 1]), np.array([[0, 1]]), np.zeros(2, int), 2)
        with pytest.raises(EvaluationError):
            edge_f1(np.array([0.5]), g)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 1_000_000))
    def test_matches_oracle(self, seed):
        g = random_graph(seed)
        truth = (g.labels[g.edges[:, 0]] == g.labels[g.edges[:, 1]]).tolist()
        if not any(truth):
            return
        scores = np.random.default_rng(seed + 1).integers(0, 5, len(truth)) / 4  # ties on purpose
        assert edge_f1(scores, g).f1 == pytest.approx(confusion_oracle(scores.tolist(), truth), abs=1e-15)

    def test_accepts_coefficient_objects(self, small):
        vals = np.random.default_rng(0).random(small.n_edges)
        perm = np.random.default_rng(1).permutation(small.n_edges)
        shuffled = EdgeCoefficients(small.edges[perm], vals[perm])
        assert edge_f1(shuffled, small).f1 == edge_f1(vals, small).f1


class TestPruneSweep:
    def test_prune_edges_fractions(self, small):
        a, d = partition_edges(small)
        g = prune_edges(small, 0.5, 1.0, seed=0)
        a2, d2 = partition_edges(g)
        assert d2.size == 0 and a2.size == round(0.5 * a.size)
        assert homophily_ratio(g) == 1.0

    def test_zero_cell_equals_baseline(self, small):
        cfg = Config(**FAST)
        rows = prune_sweep(small, cfg, seeds=[3], grid=(0.0, 1.0))
        base = run_gcn(small, cfg.replace(seed=3)).report.test_at_best
        med = cell_medians(rows)
        assert med[(0.0, 0.0)] == base
        assert len(rows) == 4
        assert [r["no_edges"] for r in rows if r["assortative_removed"] == 1 and r["disassortative_removed"] == 1] == [True]


class TestZetaSweep:
    def test_shape_and_liveness(self, small):
        rows = zeta_sweep(small, Config(**FAST), zetas=[0.0, 0.5, 1.0], seeds=[0, 1], epochs=1)
        assert len(rows) == 6
        assert set(rows[0]) == {"zeta", "seed", "f1", "precision", "recall", "k", "true_h"}
        assert all(0 <= r["f1"] <= 1 for r in rows)

    def test_best_zeta_tie_goes_low(self):
        rows = [{"zeta": 0.2, "f1": 0.5}, {"zeta": 0.1, "f1": 0.5}, {"zeta": 0.3, "f1": 0.4}]
        assert best_zeta(rows) == 0.1


class TestSummaries:
    def test_summarize(self):
        rows = [{"m": "a", "test_acc": x} for x in (0.1, 0.2, 0.6)]
        (s,) = summarize(rows, ("m",))
        assert s["median"] == 0.2 and s["n"] == 3 and s["mean"] == pytest.approx(0.3)

    def test_depth_drops(self):
        rows = [{"method": "gcn", "depth": d, "seed": 0, "test_acc": acc}
                for d, acc in ((1, 0.7), (2, 0.8), (16, 0.2))]
        assert depth_drops(rows) == {"gcn": pytest.approx(0.6)}


class TestConvergence:
    def test_champion_column_and_rows(self, small):
        rep = run(small, Config(seed=0, **FAST)).report
        rows = convergence_report(rep)
        assert len(rows) == 2 * 5
        running = np.maximum.accumulate([r["val_acc"] for r in rows])
        assert [r["champion_val"] for r in rows] == running.tolist()

    def test_replot_is_pure(self, small, tmp_path):
        rep = run(small, Config(seed=1, **FAST)).report
        path = rep.save(tmp_path / "report.json")
        first = to_csv(convergence_report(RunReport.load(path)), CONVERGENCE_HEADER)
        second = to_csv(convergence_report(RunReport.load(path)), CONVERGENCE_HEADER)
        assert first == second
        assert first.splitlines()[0] == ",".join(CONVERGENCE_HEADER)

    def test_csv_floats_are_locale_free(self):
        text = to_csv([{"a": 0.1, "b": True, "c": 3}])
        assert text == "a,b,c\n0.1,true,3\n"


class TestCli:
    ARGS = ["--synthetic", "--n-nodes", "250", "--n-features", "8", "--avg-degree", "4", "--homophily", "0.7",
            "--outer-epochs", "2", "--matcher-epochs", "1", "--gnn-epochs", "4"]

    def test_generate_then_train_from_bundle(self, tmp_path, capsys):
        assert cli.main(["generate", *self.ARGS, "--out", str(tmp_path / "bundle")]) == 0
        out = tmp_path / "run"
        assert cli.main(["train", "--bundle", str(tmp_path / "bundle"), "--outer-epochs", "2",
                         "--matcher-epochs", "1", "--gnn-epochs", "4", "--out", str(out)]) == 0
        assert {p.name for p in out.iterdir()} >= {"report.json", "coeffs.tsv", "checkpoint.bin", "timing.json"}
        rep = json.loads((out / "report.json").read_text())
        assert rep["method"] == "consm" and len(rep["epochs"]["val_acc"]) == 8
        assert cli.main(["eval-edges", "--bundle", str(tmp_path / "bundle"), "--coeffs", str(out / "coeffs.tsv"),
                         "--out", str(tmp_path / "ev")]) == 0
        assert "F1=" in capsys.readouterr().out
        assert cli.main(["convergence", "--report", str(out / "report.json"), "--out", str(tmp_path / "cv")]) == 0
        lines = (tmp_path / "cv" / "convergence.csv").read_text().splitlines()
        assert lines[0] == ",".join(CONVERGENCE_HEADER) and len(lines) == 9

    def test_json_config_with_flag_override(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"synthetic": {"n_nodes": 250, "n_features": 8, "avg_degree": 4},
                                   "outer_epochs": 1, "matcher_epochs": 1, "gnn_epochs": 3, "zeta": 0.4,
                                   "sup_reduction": "mean"}))
        assert cli.main(["baseline-gcn", "--config", str(cfg), "--gnn-epochs", "2", "--seeds", "0-1",
                         "--out", str(tmp_path / "o")]) == 0
        rep = json.loads((tmp_path / "o" / "seed_1" / "report.json").read_text())
        assert rep["config"]["gnn_epochs"] == 2 and rep["config"]["zeta"] == 0.4
        assert rep["config"]["sup_reduction"] == "mean"
        assert rep["seed"] == 1

    def test_exit_codes(self, tmp_path):
        assert cli.main(["train", "--out", str(tmp_path)]) == cli.EXIT_CONFIG  # no data source
        assert cli.main(["train", *self.ARGS, "--zeta", "2", "--out", str(tmp_path)]) == cli.EXIT_CONFIG
        assert cli.main(["train", "--bundle", str(tmp_path / "missing"), "--out", str(tmp_path)]) == cli.EXIT_DATA
        (tmp_path / "bad.json").write_text("{")
        assert cli.main(["train", "--config", str(tmp_path / "bad.json")]) == cli.EXIT_CONFIG

    def test_numerical_exit_code(self):
        from consm.errors import NumericalError
        from consm.trainer import StageError
        assert cli.exit_code_for(StageError("gnn", 3, NumericalError("nan"))) == cli.EXIT_NUMERIC

    def test_sweeps_run(self, tmp_path):
        base = self.ARGS + ["--seeds", "0"]
        assert cli.main(["prune-sweep", *base, "--grid", "0,1", "--out", str(tmp_path / "p")]) == 0
        assert (tmp_path / "p" / "prune_matrix.csv").read_text().startswith("assortative_removed,d0,d1")
        assert cli.main(["zeta-sweep", *base, "--zetas", "0,0.5", "--out", str(tmp_path / "z")]) == 0
        assert len((tmp_path / "z" / "zeta_sweep.csv").read_text().splitlines()) == 3
        assert cli.main(["depth-sweep", *base, "--depths", "1,2", "--out", str(tmp_path / "d")]) == 0
        assert len((tmp_path / "d" / "depth_sweep.csv").read_text().splitlines()) == 5

    def test_seed_parsing(self):
        assert cli.parse_seeds("0-2,7") == [0, 1, 2, 7]
