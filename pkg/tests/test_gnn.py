import math

import numpy as np
import pytest

from consm import gnn
from consm import numerics as nx
from consm.graph import TEST, TRAIN, Graph, SparseAdj, canonical_edges, normalized_adjacency
from consm.gnn import (
    GcnParams, SupTerms, confidence_threshold, dissimilarity, gcn_forward, gnn_loss, sup_loss, total_loss,
)
from consm.numerics import finite_diff_check


def toy(n=4, seed=0, f=3, c=2, edges=((0, 1), (1, 2), (2, 3), (0, 2))):
    rng = np.random.default_rng(seed)
    split = np.array([TRAIN, TRAIN] + [TEST] * (n - 2))
    return Graph(rng.normal(size=(n, f)), np.arange(n) % c, canonical_edges(edges, n), split, c)


def dense_forward(a, x, params):
    h = x
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        h = a @ (h @ w.value) + b.value
        if i < params.depth - 1:
            h = np.maximum(h, 0)
    z = h - h.max(1, keepdims=True)
    return z - np.log(np.exp(z).sum(1, keepdims=True))


class TestForward:
    def test_identity_propagation_is_mlp(self):
        g = toy(edges=())
        p = GcnParams.init(3, 2, hidden=5, seed=0)
        out = gcn_forward(normalized_adjacency(g), g.features, p)
        h = np.maximum(g.features @ p.weights[0].value + p.biases[0].value, 0)
        logits = h @ p.weights[1].value + p.biases[1].value
        assert np.allclose(out.log_probs.value, logits - np.log(np.exp(logits).sum(1, keepdims=True)))

    def test_symmetric_nodes_match(self):
        x = np.array([[1.0, 2.0], [1.0, 2.0], [0.0, -1.0]])
        g = Graph(x, np.array([0, 1, 0]), canonical_edges([(0, 2), (1, 2)], 3), np.zeros(3, int), 2)
        lp = gcn_forward(normalized_adjacency(g), x, GcnParams.init(2, 2, hidden=4, seed=1)).log_probs.value
        assert np.allclose(lp[0], lp[1], atol=1e-15)

    def test_dense_oracle(self):
        g = toy()
        p = GcnParams.init(3, 2, hidden=6, seed=2)
        a = normalized_adjacency(g)
        got = gcn_forward(a, g.features, p).log_probs.value
        assert np.abs(got - dense_forward(a.to_dense(), g.features, p)).max() < 1e-12

    @pytest.mark.parametrize("depth", [1, 2, 5])
    def test_rows_are_distributions(self, depth):
        g = toy(seed=depth)
        out = gcn_forward(normalized_adjacency(g), g.features, GcnParams.init(3, 2, hidden=4, depth=depth, seed=0))
        assert np.allclose(np.exp(out.log_probs.value).sum(1), 1, atol=1e-9)
        assert len(out.hidden) == max(depth - 1, 1)

    def test_dimension_error(self):
        from consm.errors import DimensionError
        g = toy()
        with pytest.raises(DimensionError):
            gcn_forward(normalized_adjacency(g), g.features[:, :2], GcnParams.init(3, 2, seed=0))


class TestGnnLoss:
    def test_perfect(self):
        lp = nx.Tensor(np.log(np.array([[1.0, 1e-300], [1e-300, 1.0]])))
        assert gnn_loss(lp, np.array([0, 1]), np.array([True, True])).item() == pytest.approx(0.0, abs=1e-12)

    def test_uniform_seven_classes(self):
        lp = nx.Tensor(np.full((3, 7), -math.log(7)))
        assert gnn_loss(lp, np.array([0, 3, 6]), np.ones(3, bool)).item() == pytest.approx(1.9459, abs=1e-4)

    def test_summation_oracle(self):
        rng = np.random.default_rng(0)
        z = rng.normal(size=(6, 3))
        lp = z - np.log(np.exp(z).sum(1, keepdims=True))
        labels, mask = np.array([0, 2, 1, 1, 0, 2]), np.array([1, 0, 1, 1, 0, 1], bool)
        oracle = -sum(lp[i, labels[i]] for i in range(6) if mask[i]) / mask.sum()
        assert gnn_loss(nx.Tensor(lp), labels, mask).item() == pytest.approx(oracle, rel=1e-14)


class TestDissimilarity:
    def test_cases(self):
        v = np.array([1.0, -2.0, 0.5])
        assert dissimilarity(v, v) == pytest.approx(0.0, abs=1e-15)
        assert dissimilarity(v, -v) == pytest.approx(1.0)
        assert dissimilarity([1, 0], [0, 3]) == pytest.approx(0.5)

    def test_zero_vector_is_counted(self):
        before = gnn.zero_vector_warnings
        assert dissimilarity([0, 0], [1, 1]) == 0.5
        assert gnn.zero_vector_warnings == before + 1

    def test_tensor_path_agrees(self):
        rng = np.random.default_rng(1)
        a, b = rng.normal(size=(5, 4)), rng.normal(size=(5, 4))
        d = (1.0 - nx.cosine_rows(nx.Tensor(a), nx.Tensor(b)).value[:, 0]) / 2
        assert np.allclose(d, [dissimilarity(x, y) for x, y in zip(a, b)])


class TestSupLoss:
    def test_single_lu_edge(self):
        # z0, z1 chosen so d = 0.3, i.e. cosine = 0.4
        z = np.array([[1.0, 0.0], [0.4, math.sqrt(1 - 0.16)]])
        split = np.array([TRAIN, TEST])
        terms = SupTerms.build(np.array([[0, 1]]), np.array([0.8]), split, zeta=1.0)
        assert terms.confident.tolist() == [True]
        assert sup_loss(terms, nx.Tensor(z)).item() == pytest.approx(0.24)

    def test_aligned_edges_vanish(self):
        z = np.array([[1.0, 0.0], [1.0, 0.0], [-1.0, 0.0]])
        split = np.full(3, TEST)
        edges = np.array([[0, 1], [0, 2]])
        terms = SupTerms.build(edges, np.array([1.0, 0.0]), split, zeta=0.5)
        assert terms.confident.tolist() == [True, False]
        assert sup_loss(terms, nx.Tensor(z)).item() == pytest.approx(0.0, abs=1e-15)

    def test_labeled_pairs_excluded(self):
        rng = np.random.default_rng(2)
        z = nx.Tensor(rng.normal(size=(4, 3)))
        split = np.array([TRAIN, TRAIN, TEST, TEST])
        edges = np.array([[0, 1], [0, 2], [2, 3]])
        w = np.array([0.1, 0.9, 0.4])
        base = sup_loss(SupTerms.build(edges, w, split, 0.5), z).item()
        for alt in (0.0, 0.35, 1.0):
            # the LL edge must not move the threshold past the other two either
            w2 = w.copy()
            w2[0] = alt
            t = SupTerms.build(edges, w2, split, 0.5)
            if t.threshold == SupTerms.build(edges, w, split, 0.5).threshold:
                assert sup_loss(t, z).item() == base
        assert SupTerms.build(edges, w, split, 0.5).u.tolist() == [0, 2]

    def test_uu_weighting(self):
        z = np.array([[1.0, 0.0], [0.0, 1.0]])
        split = np.array([TEST, TEST])
        terms = SupTerms.build(np.array([[0, 1]]), np.array([0.6]), split, zeta=1.0, alpha2=0.5)
        assert sup_loss(terms, nx.Tensor(z)).item() == pytest.approx(0.5 * 0.6 * 0.5)

    def test_mean_reduction(self):
        z = nx.Tensor(np.random.default_rng(3).normal(size=(4, 3)))
        split = np.full(4, TEST)
        terms = SupTerms.build(np.array([[0, 1], [1, 2], [2, 3]]), np.array([0.2, 0.5, 0.9]), split, 0.34)
        assert sup_loss(terms, z, "mean").item() == pytest.approx(sup_loss(terms, z).item() / 3)

    def test_empty(self):
        terms = SupTerms.build(np.array([[0, 1]]), np.array([0.5]), np.array([TRAIN, TRAIN]), 0.5)
        assert sup_loss(terms, nx.Tensor(np.ones((2, 2)))).item() == 0.0

    def test_non_negative(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            n = 10
            edges = canonical_edges(rng.integers(0, n, size=(20, 2)), n)
            terms = SupTerms.build(edges, rng.random(len(edges)), rng.integers(0, 3, n), rng.random())
            assert sup_loss(terms, nx.Tensor(rng.normal(size=(n, 4)))).item() >= 0


class TestThreshold:
    def test_distinct_values_give_exact_count(self):
        rng = np.random.default_rng(0)
        for zeta in np.linspace(0, 1, 21):
            w = rng.permutation(50) / 50
            k = int(math.floor(zeta * 50 + 1e-9))
            assert (w > confidence_threshold(w, zeta)).sum() == k

    def test_ties_never_exceed_count(self):
        w = np.array([0.5, 0.5, 0.5, 0.2, 0.9])
        for zeta in np.linspace(0, 1, 11):
            assert (w > confidence_threshold(w, zeta)).sum() <= int(math.floor(zeta * 5 + 1e-9))


class TestTotalLoss:
    def test_arithmetic(self):
        lp = nx.Tensor(np.log(np.array([[math.exp(-1.0), 1 - math.exp(-1.0)]])))
        z = np.array([[1.0, 0.0], [0.0, 1.0]])
        split = np.array([TEST, TEST])
        # UU edge, alpha2 = 1 here, w=0 non-confident, d=0.5 -> (1-0)(1-0.5) = 0.5; scaled by 4 -> 2.0
        terms = SupTerms.build(np.array([[0, 1]]), np.array([0.0]), split, zeta=0.0, alpha2=4.0)
        total, base, sup = total_loss(lp, nx.Tensor(z), np.array([0]), np.array([True]), terms, 0.05)
        assert base.item() == pytest.approx(1.0)
        assert sup.item() == pytest.approx(2.0)
        assert total.item() == pytest.approx(1.1)

    def test_lambda_zero(self):
        lp = nx.Tensor(np.log(np.full((2, 2), 0.5)))
        total, base, sup = total_loss(lp, lp, np.array([0, 1]), np.ones(2, bool), None, 0.0)
        assert total is base and sup is None

    def test_gradient_six_nodes(self):
        g = toy(n=6, seed=5, edges=((0, 1), (1, 2), (2, 3), (3, 4), (4, 5), (0, 5), (1, 4)))
        p = GcnParams.init(3, 2, hidden=4, seed=5)
        a = normalized_adjacency(g)
        w = np.random.default_rng(5).random(g.n_edges)
        terms = SupTerms.build(g.edges, w, g.split, 0.5)

        def loss_fn():
            out = gcn_forward(a, g.features, p)
            return total_loss(out.log_probs, out.regularised(), g.labels, g.train_mask, terms, 0.05)[0]

        assert finite_diff_check(loss_fn, p.tensors(), h=1e-6) < 1e-4


def test_sparse_and_dense_adjacency_agree():
    g = toy()
    p = GcnParams.init(3, 2, hidden=4, seed=0)
    a = normalized_adjacency(g)
    assert isinstance(a, SparseAdj)
    sparse = gcn_forward(a, g.features, p).log_probs.value
    dense = gcn_forward(a.to_dense(), g.features, p).log_probs.value
    assert np.allclose(sparse, dense, atol=1e-14)
