"""Confidence-based subgraph matching.

Nodes are encoded by an MLP, class reference points are the mean embedding of
each class's training nodes, and edges are scored against those references.
Only the top ``floor(zeta * |E|)`` edges survive pruning; the 2-hop closure
of the survivors defines each node's subgraph. A subgraph is summarised by
sending every member to its nearest reference and averaging per reference,
and a small head compares two such summaries to estimate the probability
that the two centers share a label.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from . import numerics as nx
from .config import Config
from .errors import BundleError, ContractError, EmptyClassError, SamplingError
from .graph import Graph, SparseAdj, Subgraph, extract_subgraph, two_hop_closure
from .numerics import Adam, Tape, Tensor
from .transport import barycentric_weights, nearest_reference, sinkhorn, squared_distances


EXPORT_SALT = 1 << 20


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


@dataclass
class MatcherParams:
    enc_w1: Tensor
    enc_b1: Tensor
    enc_w2: Tensor
    enc_b2: Tensor
    head_w1: Tensor
    head_b1: Tensor
    head_w2: Tensor
    head_b2: Tensor
    cls_w: Tensor
    cls_b: Tensor
    gam_w1: Tensor
    gam_b1: Tensor
    gam_w2: Tensor
    gam_b2: Tensor

    @classmethod
    def init(cls, n_features: int, n_classes: int, hidden: int = 64, seed: int = 0) -> "MatcherParams":
        rng = np.random.default_rng(seed)
        p = nx.parameter
        return cls(
            enc_w1=p(glorot(rng, n_features, hidden), "enc_w1"),
            enc_b1=p(np.zeros((1, hidden)), "enc_b1"),
            enc_w2=p(glorot(rng, hidden, hidden), "enc_w2"),
            enc_b2=p(np.zeros((1, hidden)), "enc_b2"),
            head_w1=p(glorot(rng, 2 * n_classes * hidden, hidden), "head_w1"),
            head_b1=p(np.zeros((1, hidden)), "head_b1"),
            head_w2=p(glorot(rng, hidden, 1), "head_w2"),
            head_b2=p(np.zeros((1, 1)), "head_b2"),
            cls_w=p(glorot(rng, hidden, n_classes), "cls_w"),
            cls_b=p(np.zeros((1, n_classes)), "cls_b"),
            gam_w1=p(glorot(rng, hidden, hidden), "gam_w1"),
            gam_b1=p(np.zeros((1, hidden)), "gam_b1"),
            gam_w2=p(glorot(rng, hidden, 1), "gam_w2"),
            gam_b2=p(np.zeros((1, 1)), "gam_b2"),
        )

    def tensors(self, head: str = "subgraph") -> list[Tensor]:
        """Parameters trained under ``head``; the unused head is left out."""
        enc = [self.enc_w1, self.enc_b1, self.enc_w2, self.enc_b2, self.cls_w, self.cls_b]
        if head == "gam":
            return enc + [self.gam_w1, self.gam_b1, self.gam_w2, self.gam_b2]
        return enc + [self.head_w1, self.head_b1, self.head_w2, self.head_b2]

    @property
    def n_classes(self) -> int:
        return self.cls_w.shape[1]

    @property
    def hidden(self) -> int:
        return self.enc_w2.shape[1]


# -- forward pieces --------------------------------------------------------


def encode(params: MatcherParams, x) -> Tensor:
    h = nx.relu(nx.as_tensor(x) @ params.enc_w1 + params.enc_b1)
    return h @ params.enc_w2 + params.enc_b2


def classify(params: MatcherParams, h: Tensor) -> Tensor:
    """Log class probabilities of (center) embeddings."""
    return nx.log_softmax(h @ params.cls_w + params.cls_b)


def match_head(params: MatcherParams, zi: Tensor, zj: Tensor) -> Tensor:
    """w for flattened projections, i's block first. Column vector in (0, 1)."""
    z = nx.concat([nx.as_tensor(zi), nx.as_tensor(zj)], axis=1)
    hid = nx.relu(z @ params.head_w1 + params.head_b1)
    return nx.sigmoid(hid @ params.head_w2 + params.head_b2)


def gam_head(params: MatcherParams, hi, hj) -> Tensor:
    """Center-only agreement head: MLP of the squared embedding difference."""
    diff = nx.as_tensor(hi) - nx.as_tensor(hj)
    hid = nx.relu(nx.mul(diff, diff) @ params.gam_w1 + params.gam_b1)
    return nx.sigmoid(hid @ params.gam_w2 + params.gam_b2)


def compute_references(h: np.ndarray, labels: np.ndarray, train_mask: np.ndarray, n_classes: int) -> np.ndarray:
    """Per-class mean of training-node embeddings, shape (C, F)."""
    h = np.asarray(h)
    r = np.empty((n_classes, h.shape[1]))
    for c in range(n_classes):
        sel = train_mask & (labels == c)
        if not sel.any():
            raise EmptyClassError(c)
        r[c] = h[sel].mean(axis=0)
    return r


def prune_count(n_edges: int, zeta: float) -> int:
    """floor(zeta * n_edges), robust to binary rounding of products like 0.29 * 100."""
    return min(n_edges, int(math.floor(zeta * n_edges + 1e-9)))


def rank_edges(scores: np.ndarray) -> np.ndarray:
    """Edge indices by descending score, ties broken by lower index."""
    scores = np.asarray(scores, dtype=np.float64)
    return np.lexsort((np.arange(scores.size), -scores))


def edge_scores(h: np.ndarray, r: np.ndarray, edges: np.ndarray) -> np.ndarray:
    """dot(S_u, S_v) where S is the cosine score of every node against every reference."""
    hn = _unit_rows(h)
    rn = _unit_rows(r)
    s = hn @ rn.T
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    return (s[edges[:, 0]] * s[edges[:, 1]]).sum(axis=1)


def _unit_rows(a: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(a, axis=1, keepdims=True)
    return np.divide(a, norm, out=np.zeros_like(a, dtype=np.float64), where=norm > 0)


@dataclass
class PruneResult:
    kept: np.ndarray  # indices into the edge array, in rank order
    scores: np.ndarray
    k: int


def score_and_prune(h: np.ndarray, r: np.ndarray, edges: np.ndarray, zeta: float) -> PruneResult:
    if not 0.0 <= zeta <= 1.0:
        raise ContractError(f"zeta must lie in [0, 1], got {zeta}")
    scores = edge_scores(h, r, edges)
    k = prune_count(scores.size, zeta)
    return PruneResult(rank_edges(scores)[:k], scores, k)


# -- pair sampling ---------------------------------------------------------


@dataclass
class PairSample:
    i: np.ndarray
    j: np.ndarray
    y: np.ndarray  # 1 when labels agree

    def __len__(self):
        return self.i.size

    def __getitem__(self, sl):
        return PairSample(self.i[sl], self.j[sl], self.y[sl])


def sample_pairs(labels: np.ndarray, train_mask: np.ndarray, n_pairs: int,
                 rng: np.random.Generator | int) -> PairSample:
    """n_pairs/2 positive then n_pairs/2 negative pairs of distinct training nodes, with replacement."""
    if n_pairs < 2 or n_pairs % 2:
        raise ContractError("n_pairs must be an even number >= 2")
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    nodes = np.flatnonzero(train_mask)
    lab = labels[nodes]
    classes, counts = np.unique(lab, return_counts=True)
    if classes.size < 2:
        raise SamplingError("training split holds a single class; no negative pair exists")
    pos_ok = np.isin(lab, classes[counts >= 2])
    if not pos_ok.any():
        raise SamplingError("no class has two training nodes; no positive pair exists")
    half = n_pairs // 2
    by_class = {c: nodes[lab == c] for c in classes}

    pi = rng.choice(nodes[pos_ok], size=half)
    pj = np.empty(half, dtype=np.int64)
    for t, a in enumerate(pi):
        pool = by_class[labels[a]]
        # uniform over the class minus a itself
        k = rng.integers(pool.size - 1)
        pj[t] = pool[k] if pool[k] != a else pool[-1]

    ni = rng.choice(nodes, size=half)
    nj = np.empty(half, dtype=np.int64)
    for t, a in enumerate(ni):
        pool = nodes[lab != labels[a]]
        nj[t] = pool[rng.integers(pool.size)]

    return PairSample(np.concatenate([pi, ni]).astype(np.int64), np.concatenate([pj, nj]).astype(np.int64),
                      np.concatenate([np.ones(half), np.zeros(half)]))


# -- subgraph projection ---------------------------------------------------


def projection_matrix(subgraphs: list[Subgraph], local: dict[int, int] | np.ndarray, h: np.ndarray,
                      r: np.ndarray, projection: str = "monge", sinkhorn_kw: dict | None = None) -> sp.csr_matrix:
    """Sparse (B*C, U) operator mapping encoded union rows to stacked per-subgraph projections.

    ``h`` holds the (constant) embeddings of the union rows used to decide the
    plan; the operator itself is applied to the differentiable embeddings, so
    gradients flow through the averaging but not through the assignment.
    """
    n_refs = r.shape[0]
    rows, cols, vals = [], [], []
    if projection == "monge":
        ref_of = nearest_reference(h, r)
        for b, sg in enumerate(subgraphs):
            loc = local[sg.members]
            ref = ref_of[loc]
            counts = np.bincount(ref, minlength=n_refs)
            rows.append(b * n_refs + ref)
            cols.append(loc)
            vals.append(1.0 / counts[ref])
    else:
        kw = sinkhorn_kw or {}
        for b, sg in enumerate(subgraphs):
            loc = local[sg.members]
            plan = sinkhorn(squared_distances(h[loc], r), **kw).matrix
            rr, cc = np.nonzero(plan)
            rows.append(b * n_refs + rr)
            cols.append(loc[cc])
            vals.append(plan[rr, cc])
    u = h.shape[0]
    if not rows:
        return sp.csr_matrix((0, u))
    return sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                         shape=(len(subgraphs) * n_refs, u))


def project_subgraphs(params: MatcherParams, features: np.ndarray, subgraphs: list[Subgraph], r: np.ndarray,
                      projection: str = "monge", sinkhorn_kw: dict | None = None) -> tuple[Tensor, Tensor]:
    """Encode every subgraph member once and return (flattened projections (B, C*F), center embeddings (B, F))."""
    union = np.unique(np.concatenate([sg.members for sg in subgraphs]))
    local = np.full(features.shape[0], -1, dtype=np.int64)
    local[union] = np.arange(union.size)
    h = encode(params, features[union])
    op = projection_matrix(subgraphs, local, h.value, r, projection, sinkhorn_kw)
    flat = nx.reshape(nx.spmm(op, h), len(subgraphs), r.shape[0] * h.shape[1])
    centers = nx.take_rows(h, local[[sg.center for sg in subgraphs]])
    return flat, centers


def match_pair(params: MatcherParams, features: np.ndarray, gi: Subgraph, gj: Subgraph, r: np.ndarray,
               projection: str = "monge") -> float:
    flat, _ = project_subgraphs(params, features, [gi, gj], r, projection)
    return match_head(params, nx.take_rows(flat, [0]), nx.take_rows(flat, [1])).item()


def matcher_loss(w: Tensor, y, logp_i: Tensor, logp_j: Tensor, yi, yj) -> Tensor:
    """Summed over pairs: |w| for disagreeing pairs, |w - 1| for agreeing ones, plus both centers' NLL."""
    y = np.asarray(y, dtype=np.float64).reshape(-1, 1)
    rows = np.arange(w.shape[0])
    agree = nx.l1_distance(w, nx.Tensor(y))
    nll = nx.total(nx.pick(logp_i, rows, yi)) + nx.total(nx.pick(logp_j, rows, yj))
    return agree - nll


# -- coefficients ----------------------------------------------------------


@dataclass
class EdgeCoefficients:
    edges: np.ndarray
    values: np.ndarray
    provenance: str = "matcher-output"

    def __len__(self):
        return self.values.size

    def as_dict(self) -> dict[tuple[int, int], float]:
        return {(int(u), int(v)): float(w) for (u, v), w in zip(self.edges, self.values)}

    def save(self, path) -> Path:
        path = Path(path)
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for (u, v), w in zip(self.edges, self.values):
                fh.write(f"{u}\t{v}\t{w:.17g}\n")
        return path

    @classmethod
    def load(cls, path) -> "EdgeCoefficients":
        edges, vals = [], []
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                parts = line.rstrip("\n").split("\t")
                try:
                    u, v, w = int(parts[0]), int(parts[1]), float(parts[2])
                except (ValueError, IndexError):
                    raise BundleError("malformed-row", str(path), lineno, "expected <u>\\t<v>\\t<w>") from None
                if u >= v:
                    raise BundleError("malformed-row", str(path), lineno, "rows must satisfy u < v")
                edges.append((u, v))
                vals.append(w)
        return cls(np.array(edges, dtype=np.int64).reshape(-1, 2), np.array(vals), "file")

    def aligned_to(self, graph_edges: np.ndarray) -> np.ndarray:
        """Values reordered to ``graph_edges``; raises if coverage is not exact."""
        lookup = self.as_dict()
        if len(lookup) != len(graph_edges):
            raise ContractError("coefficients do not cover the edge set exactly")
        try:
            return np.array([lookup[(int(u), int(v))] for u, v in graph_edges])
        except KeyError as exc:
            raise ContractError(f"edge {exc.args[0]} has no coefficient") from None


# -- training --------------------------------------------------------------


@dataclass
class EpochStats:
    loss: float
    n_kept: int
    mean_subgraph: float


class SubgraphMatcher:
    """Stateful matcher: parameters and optimiser persist across :meth:`train_epoch` calls."""

    def __init__(self, graph: Graph, config: Config, seed: int | None = None):
        self.graph = graph
        self.config = config
        self.seed = config.seed if seed is None else seed
        self.params = MatcherParams.init(graph.n_features, graph.n_classes, config.hidden, seed=self.seed)
        self.trainable = self.params.tensors(config.head)
        self.optimizer = Adam(self.trainable, lr=config.lr, weight_decay=config.weight_decay,
                              betas=(config.beta1, config.beta2), eps=config.adam_eps)
        self.rng = np.random.default_rng([self.seed, 0x5A])
        self.epoch = 0
        self.history: list[EpochStats] = []
        n_train = int(graph.train_mask.sum())
        self.pairs_per_epoch = config.pairs_per_epoch or 4 * n_train
        self.pairs_per_epoch += self.pairs_per_epoch % 2

    @property
    def sinkhorn_kw(self) -> dict:
        c = self.config
        return {"eps": c.sinkhorn_eps, "max_iters": c.sinkhorn_iters, "tol": c.sinkhorn_tol}

    def embed_all(self) -> np.ndarray:
        return encode(self.params, self.graph.features).value

    def references(self, h: np.ndarray) -> np.ndarray:
        g = self.graph
        return compute_references(h, g.labels, g.train_mask, g.n_classes)

    def confident_adjacency(self, h: np.ndarray, r: np.ndarray) -> tuple[SparseAdj, PruneResult]:
        g = self.graph
        pruned = score_and_prune(h, r, g.edges, self.config.zeta)
        kept = SparseAdj.from_edges(g.n_nodes, g.edges[np.sort(pruned.kept)])
        return two_hop_closure(kept), pruned

    def subgraphs(self, adj: SparseAdj, centers, salt: int) -> list[Subgraph]:
        cap = self.config.subgraph_cap
        return [extract_subgraph(adj, int(c), cap, seed=self.seed * 1_000_003 + salt) for c in centers]

    def _pair_scores(self, sub_i: list[Subgraph], sub_j: list[Subgraph], r: np.ndarray) -> tuple[Tensor, Tensor, Tensor]:
        b = len(sub_i)
        flat, centers = project_subgraphs(self.params, self.graph.features, sub_i + sub_j, r,
                                          self.config.projection, self.sinkhorn_kw)
        ci = nx.take_rows(centers, np.arange(b))
        cj = nx.take_rows(centers, np.arange(b, 2 * b))
        if self.config.head == "gam":
            w = gam_head(self.params, ci, cj)
        else:
            w = match_head(self.params, nx.take_rows(flat, np.arange(b)), nx.take_rows(flat, np.arange(b, 2 * b)))
        return w, ci, cj

    def train_epoch(self) -> EpochStats:
        g = self.graph
        h = self.embed_all()
        r = self.references(h)
        adj, pruned = self.confident_adjacency(h, r)
        pairs = sample_pairs(g.labels, g.train_mask, self.pairs_per_epoch, self.rng)
        half = len(pairs) // 2
        pos = self.rng.permutation(half)
        neg = half + self.rng.permutation(half)
        step = self.config.batch_size // 2
        salt = self.epoch
        total_loss, sizes = 0.0, []
        for start in range(0, half, step):
            idx = np.concatenate([pos[start:start + step], neg[start:start + step]])
            batch = pairs[idx]
            sub_i = self.subgraphs(adj, batch.i, salt)
            sub_j = self.subgraphs(adj, batch.j, salt)
            sizes.extend(sg.size for sg in sub_i + sub_j)
            with Tape() as tape:
                w, ci, cj = self._pair_scores(sub_i, sub_j, r)
                loss = matcher_loss(w, batch.y, classify(self.params, ci), classify(self.params, cj),
                                    g.labels[batch.i], g.labels[batch.j])
            self.optimizer.step(tape.gradient(loss, self.trainable))
            total_loss += loss.item()
        self.epoch += 1
        stats = EpochStats(total_loss / len(pairs), pruned.k, float(np.mean(sizes)))
        self.history.append(stats)
        return stats

    def export(self, chunk: int = 4096) -> EdgeCoefficients:
        """w for every original edge, evaluated in (u, v) order with u < v using the current parameters."""
        g = self.graph
        if g.n_edges == 0:
            return EdgeCoefficients(g.edges.copy(), np.zeros(0))
        h = self.embed_all()
        r = self.references(h)
        if self.config.head == "gam":
            w = gam_head(self.params, h[g.edges[:, 0]], h[g.edges[:, 1]]).value[:, 0]
            return EdgeCoefficients(g.edges.copy(), w)
        adj, _ = self.confident_adjacency(h, r)
        nodes = np.unique(g.edges)
        subs = self.subgraphs(adj, nodes, salt=EXPORT_SALT)
        flat, _ = project_subgraphs(self.params, g.features, subs, r, self.config.projection, self.sinkhorn_kw)
        row_of = np.full(g.n_nodes, -1, dtype=np.int64)
        row_of[nodes] = np.arange(nodes.size)
        z = flat.value
        out = np.empty(g.n_edges)
        for start in range(0, g.n_edges, chunk):
            e = g.edges[start:start + chunk]
            out[start:start + chunk] = match_head(self.params, z[row_of[e[:, 0]]], z[row_of[e[:, 1]]]).value[:, 0]
        return EdgeCoefficients(g.edges.copy(), out)


@dataclass
class MatcherResult:
    params: MatcherParams
    coefficients: EdgeCoefficients
    losses: list[float] = field(default_factory=list)


def train_matcher(graph: Graph, config: Config, epochs: int | None = None, seed: int | None = None) -> MatcherResult:
    """Run ``epochs`` matcher epochs (default ``config.matcher_epochs``) and export coefficients."""
    m = SubgraphMatcher(graph, config, seed)
    n = config.matcher_epochs if epochs is None else epochs
    for _ in range(n):
        m.train_epoch()
    return MatcherResult(m.params, m.export(), [s.loss for s in m.history])
