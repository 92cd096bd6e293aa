"""Graph data model, bundle I/O, adjacency transforms and a synthetic generator."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .errors import BundleError, ContractError, EvaluationError, GenerationError

SPLITS = ("train", "val", "test")
TRAIN, VAL, TEST = 0, 1, 2


def canonical_edges(pairs, n_nodes: int | None = None) -> np.ndarray:
    """Undirected, deduplicated, self-loop free (M, 2) array with u < v, lexicographically sorted."""
    arr = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    if arr.size == 0:
        return np.zeros((0, 2), dtype=np.int64)
    lo = np.minimum(arr[:, 0], arr[:, 1])
    hi = np.maximum(arr[:, 0], arr[:, 1])
    keep = lo != hi
    lo, hi = lo[keep], hi[keep]
    if n_nodes is not None and hi.size and (hi.max() >= n_nodes or lo.min() < 0):
        raise ContractError(f"edge endpoint outside 0..{n_nodes - 1}")
    uniq = np.unique(np.stack([lo, hi], axis=1), axis=0)
    return uniq.astype(np.int64)


@dataclass(frozen=True, eq=False)
class Graph:
    """Immutable attributed graph with a transductive split.

    ``split`` holds 0/1/2 for train/val/test. ``edges`` must already be canonical
    (see :func:`canonical_edges`).
    """

    features: np.ndarray
    labels: np.ndarray
    edges: np.ndarray
    split: np.ndarray
    n_classes: int
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        n = self.features.shape[0]
        if self.labels.shape != (n,) or self.split.shape != (n,):
            raise ContractError("labels/split length must equal the number of feature rows")
        if self.edges.size and (self.edges[:, 0] >= self.edges[:, 1]).any():
            raise ContractError("edges must satisfy u < v")
        if self.edges.size and self.edges.max() >= n:
            raise ContractError("edge endpoint out of range")
        if not np.isfinite(self.features).all():
            raise ContractError("feature rows must be finite")
        for arr in (self.features, self.labels, self.edges, self.split):
            arr.setflags(write=False)

    @property
    def n_nodes(self) -> int:
        return self.features.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    @property
    def n_edges(self) -> int:
        """Undirected pair count."""
        return self.edges.shape[0]

    @property
    def n_edges_directed(self) -> int:
        """Nonzero count of the symmetric adjacency, the convention of published dataset tables."""
        return 2 * self.edges.shape[0]

    def mask(self, which: str) -> np.ndarray:
        return self.split == SPLITS.index(which)

    @property
    def train_mask(self) -> np.ndarray:
        return self.split == TRAIN

    @property
    def val_mask(self) -> np.ndarray:
        return self.split == VAL

    @property
    def test_mask(self) -> np.ndarray:
        return self.split == TEST

    def adjacency(self) -> "SparseAdj":
        if "adj" not in self._cache:
            self._cache["adj"] = SparseAdj.from_edges(self.n_nodes, self.edges)
        return self._cache["adj"]

    def with_edges(self, edges) -> "Graph":
        return Graph(np.array(self.features), np.array(self.labels), canonical_edges(edges, self.n_nodes),
                     np.array(self.split), self.n_classes)


@dataclass(frozen=True, eq=False)
class SparseAdj:
    """Symmetric adjacency in CSR form. ``matrix[u, v]`` is the edge weight (1 when unweighted)."""

    matrix: sp.csr_matrix

    @classmethod
    def from_edges(cls, n: int, edges, weights=None) -> "SparseAdj":
        edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        w = np.ones(len(edges)) if weights is None else np.asarray(weights, dtype=np.float64)
        rows = np.concatenate([edges[:, 0], edges[:, 1]])
        cols = np.concatenate([edges[:, 1], edges[:, 0]])
        data = np.concatenate([w, w])
        m = sp.csr_matrix((data, (rows, cols)), shape=(n, n))
        m.sum_duplicates()
        m.sort_indices()
        return cls(m)

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    def neighbors(self, u: int) -> np.ndarray:
        m = self.matrix
        return m.indices[m.indptr[u]:m.indptr[u + 1]]

    def degrees(self) -> np.ndarray:
        return np.diff(self.matrix.indptr)

    def edges(self) -> np.ndarray:
        """Off-diagonal upper-triangle pairs."""
        upper = sp.triu(self.matrix, k=1).tocoo()
        return canonical_edges(np.stack([upper.row, upper.col], axis=1))

    def to_dense(self) -> np.ndarray:
        return self.matrix.toarray()

    def is_symmetric(self) -> bool:
        diff = self.matrix - self.matrix.T
        return diff.nnz == 0 or np.abs(diff.data).max() == 0


@dataclass(frozen=True)
class Subgraph:
    center: int
    members: np.ndarray

    @property
    def size(self) -> int:
        return self.members.size


# -- bundle I/O ------------------------------------------------------------

_META_KEYS = ("n_nodes", "n_features", "n_classes", "n_edges_undirected")


def load_bundle(path) -> Graph:
    """Read a graph bundle directory (meta.json, nodes.tsv, edges.tsv, features.csv)."""
    root = Path(path)
    for name in ("meta.json", "nodes.tsv", "edges.tsv", "features.csv"):
        if not (root / name).is_file():
            raise BundleError("missing-file", name, 0, f"not found in {root}")

    try:
        meta = json.loads((root / "meta.json").read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise BundleError("malformed-row", "meta.json", exc.lineno, exc.msg) from None
    for key in _META_KEYS:
        if not isinstance(meta.get(key), int) or meta[key] < 0:
            raise BundleError("malformed-row", "meta.json", 0, f"{key} must be a non-negative integer")
    n, f, c = meta["n_nodes"], meta["n_features"], meta["n_classes"]

    labels = np.empty(n, dtype=np.int64)
    split = np.empty(n, dtype=np.int64)
    count = 0
    for lineno, line in enumerate(_lines(root / "nodes.tsv"), start=1):
        parts = line.split("\t")
        if len(parts) != 3:
            raise BundleError("malformed-row", "nodes.tsv", lineno, "expected <id>\\t<label>\\t<split>")
        try:
            nid, lab = int(parts[0]), int(parts[1])
        except ValueError:
            raise BundleError("malformed-row", "nodes.tsv", lineno, "id and label must be integers") from None
        if nid != count:
            if nid >= n or nid < 0:
                raise BundleError("endpoint-out-of-range", "nodes.tsv", lineno, f"node id {nid} outside 0..{n - 1}")
            raise BundleError("malformed-row", "nodes.tsv", lineno, f"expected id {count}, got {nid}")
        if count >= n:
            raise BundleError("count-mismatch", "nodes.tsv", lineno, f"more than {n} nodes")
        if not 0 <= lab < c:
            raise BundleError("label-out-of-range", "nodes.tsv", lineno, f"label {lab} not in 0..{c - 1}")
        if parts[2] not in SPLITS:
            raise BundleError("malformed-row", "nodes.tsv", lineno, f"unknown split {parts[2]!r}")
        labels[count] = lab
        split[count] = SPLITS.index(parts[2])
        count += 1
    if count != n:
        raise BundleError("count-mismatch", "nodes.tsv", 0, f"meta declares {n} nodes, file has {count}")

    pairs = []
    for lineno, line in enumerate(_lines(root / "edges.tsv"), start=1):
        parts = line.split("\t")
        if len(parts) != 2:
            raise BundleError("malformed-row", "edges.tsv", lineno, "expected <u>\\t<v>")
        try:
            u, v = int(parts[0]), int(parts[1])
        except ValueError:
            raise BundleError("malformed-row", "edges.tsv", lineno, "endpoints must be integers") from None
        if not (0 <= u < n and 0 <= v < n):
            raise BundleError("endpoint-out-of-range", "edges.tsv", lineno, f"({u}, {v}) outside 0..{n - 1}")
        pairs.append((u, v))
    edges = canonical_edges(pairs)
    if len(edges) != meta["n_edges_undirected"]:
        raise BundleError("count-mismatch", "edges.tsv", 0,
                          f"meta declares {meta['n_edges_undirected']} undirected edges, found {len(edges)}")

    rows = []
    for lineno, line in enumerate(_lines(root / "features.csv"), start=1):
        try:
            row = [float(x) for x in line.split(",")]
        except ValueError:
            raise BundleError("malformed-row", "features.csv", lineno, "non-numeric value") from None
        if len(row) != f:
            raise BundleError("malformed-row", "features.csv", lineno, f"expected {f} values, got {len(row)}")
        if not all(math.isfinite(x) for x in row):
            raise BundleError("malformed-row", "features.csv", lineno, "non-finite value")
        rows.append(row)
    if len(rows) != n:
        raise BundleError("count-mismatch", "features.csv", 0, f"meta declares {n} rows, file has {len(rows)}")
    features = np.array(rows, dtype=np.float64).reshape(n, f)
    return Graph(features, labels, edges, split, c)


def _lines(path: Path):
    with open(path, encoding="utf-8") as fh:
        for raw in fh:
            line = raw.rstrip("\r\n")
            if line.strip():
                yield line


def save_bundle(graph: Graph, path) -> Path:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    meta = {
        "n_nodes": graph.n_nodes,
        "n_features": graph.n_features,
        "n_classes": graph.n_classes,
        "n_edges_undirected": graph.n_edges,
    }
    (root / "meta.json").write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")
    with open(root / "nodes.tsv", "w", encoding="utf-8", newline="\n") as fh:
        for i in range(graph.n_nodes):
            fh.write(f"{i}\t{graph.labels[i]}\t{SPLITS[graph.split[i]]}\n")
    with open(root / "edges.tsv", "w", encoding="utf-8", newline="\n") as fh:
        for u, v in graph.edges:
            fh.write(f"{u}\t{v}\n")
    with open(root / "features.csv", "w", encoding="utf-8", newline="\n") as fh:
        for row in graph.features:
            fh.write(",".join(repr(float(x)) for x in row) + "\n")
    return root


# -- adjacency transforms --------------------------------------------------


def normalized_adjacency(graph_or_adj) -> SparseAdj:
    """D^-1/2 (A + I) D^-1/2 with D the degree of A + I."""
    adj = graph_or_adj.adjacency() if isinstance(graph_or_adj, Graph) else graph_or_adj
    a = adj.matrix
    a_hat = (a + sp.identity(a.shape[0], format="csr")).tocsr()
    deg = np.asarray(a_hat.sum(axis=1)).ravel()
    inv_sqrt = 1.0 / np.sqrt(deg)
    d = sp.diags(inv_sqrt)
    out = (d @ a_hat @ d).tocsr()
    out.sort_indices()
    return SparseAdj(out)


def two_hop_closure(adj: SparseAdj) -> SparseAdj:
    """Boolean A or A^2 with the diagonal removed."""
    a = adj.matrix.copy()
    a.data = np.ones_like(a.data)
    reach = (a + a @ a).tocsr()
    reach.setdiag(0)
    reach.eliminate_zeros()
    reach.data = np.ones_like(reach.data)
    reach.sort_indices()
    return SparseAdj(reach)


def homophily_ratio(graph: Graph) -> float:
    if graph.n_edges == 0:
        raise EvaluationError("homophily ratio is undefined for a graph without edges")
    same = graph.labels[graph.edges[:, 0]] == graph.labels[graph.edges[:, 1]]
    return float(same.sum()) / graph.n_edges


def partition_edges(graph: Graph) -> tuple[np.ndarray, np.ndarray]:
    """Indices of assortative (same-label) and disassortative edges."""
    same = graph.labels[graph.edges[:, 0]] == graph.labels[graph.edges[:, 1]]
    return np.flatnonzero(same), np.flatnonzero(~same)


def extract_subgraph(adj: SparseAdj, center: int, cap: int = 128, seed: int = 0) -> Subgraph:
    """Center plus its neighbors in ``adj``; above ``cap`` a seeded uniform sample of cap-1 neighbors."""
    if not 0 <= center < adj.n:
        raise ContractError(f"center {center} outside 0..{adj.n - 1}")
    if cap < 1:
        raise ContractError("cap must be at least 1")
    nbrs = adj.neighbors(center)
    nbrs = nbrs[nbrs != center]
    if nbrs.size + 1 > cap:
        rng = np.random.default_rng([seed, center])
        nbrs = np.sort(rng.choice(nbrs, size=cap - 1, replace=False))
    return Subgraph(center, np.concatenate([[center], nbrs]).astype(np.int64))


# -- synthetic data --------------------------------------------------------


def generate_synthetic(n_nodes: int = 2000, n_classes: int = 5, n_features: int = 32,
                       avg_degree: float = 5.0, target_h: float = 0.8, feature_noise: float = 0.5,
                       seed: int = 0, train_per_class: int = 20) -> Graph:
    """Class-balanced graph whose edge homophily is fixed by construction.

    Exactly ``round(target_h * M)`` edges are drawn within a class and the rest
    across classes, endpoints uniform on the chosen side. Features are a class
    mean on the unit sphere plus isotropic Gaussian noise of scale
    ``feature_noise``.
    """
    if n_classes < 1 or n_nodes < n_classes * (train_per_class + 5):
        raise GenerationError(f"need at least {n_classes * (train_per_class + 5)} nodes for {n_classes} classes")
    if not 0.0 <= target_h <= 1.0:
        raise GenerationError("target_h must lie in [0, 1]")
    if avg_degree < 2:
        raise GenerationError("avg_degree must be at least 2")
    rng = np.random.default_rng(seed)

    labels = np.arange(n_nodes) % n_classes
    rng.shuffle(labels)
    members = [np.flatnonzero(labels == c) for c in range(n_classes)]
    sizes = np.array([m.size for m in members])

    n_edges = int(round(n_nodes * avg_degree / 2))
    n_intra = int(round(target_h * n_edges))
    n_inter = n_edges - n_intra
    intra_cap = int((sizes * (sizes - 1) // 2).sum())
    inter_cap = int((sizes.sum() ** 2 - (sizes ** 2).sum()) // 2)
    if n_intra > intra_cap or n_inter > inter_cap:
        raise GenerationError(f"requested {n_intra} intra / {n_inter} inter edges exceeds "
                              f"{intra_cap} / {inter_cap} possible pairs")
    if n_inter and n_classes < 2:
        raise GenerationError("inter-class edges need at least two classes")

    intra = _draw_pairs(rng, n_intra, lambda k: _intra_batch(rng, members, k), n_nodes)
    inter = _draw_pairs(rng, n_inter, lambda k: _inter_batch(rng, members, k), n_nodes)
    edges = canonical_edges(np.concatenate([intra, inter]))

    means = rng.normal(size=(n_classes, n_features))
    means /= np.linalg.norm(means, axis=1, keepdims=True)
    features = means[labels] + feature_noise * rng.normal(size=(n_nodes, n_features))

    split = np.empty(n_nodes, dtype=np.int64)
    rest = []
    for m in members:
        perm = rng.permutation(m)
        split[perm[:train_per_class]] = TRAIN
        rest.append(perm[train_per_class:])
    rest = rng.permutation(np.concatenate(rest))
    half = rest.size // 2
    split[rest[:half]] = VAL
    split[rest[half:]] = TEST
    return Graph(features, labels.astype(np.int64), edges, split, n_classes)


def _intra_batch(rng, members, k):
    sizes = np.array([m.size for m in members], dtype=np.float64)
    weight = sizes * (sizes - 1)
    cls = rng.choice(len(members), size=k, p=weight / weight.sum())
    out = np.empty((k, 2), dtype=np.int64)
    for c in np.unique(cls):
        sel = np.flatnonzero(cls == c)
        out[sel, 0] = rng.choice(members[c], size=sel.size)
        out[sel, 1] = rng.choice(members[c], size=sel.size)
    return out


def _inter_batch(rng, members, k):
    sizes = np.array([m.size for m in members], dtype=np.float64)
    a = rng.choice(len(members), size=k, p=sizes / sizes.sum())
    # partner class drawn in proportion to size, excluding the first class
    out = np.empty((k, 2), dtype=np.int64)
    for c in np.unique(a):
        sel = np.flatnonzero(a == c)
        w = sizes.copy()
        w[c] = 0
        b = rng.choice(len(members), size=sel.size, p=w / w.sum())
        out[sel, 0] = rng.choice(members[c], size=sel.size)
        for d in np.unique(b):
            sub = sel[b == d]
            out[sub, 1] = rng.choice(members[d], size=sub.size)
    return out


def _draw_pairs(rng, quota: int, batch, n_nodes: int) -> np.ndarray:
    """Rejection-sample ``quota`` distinct unordered pairs from ``batch``."""
    if quota == 0:
        return np.zeros((0, 2), dtype=np.int64)
    seen: set[int] = set()
    chosen: list[tuple[int, int]] = []
    while len(chosen) < quota:
        need = quota - len(chosen)
        for u, v in batch(max(2 * need, 16)):
            if u == v:
                continue
            lo, hi = (u, v) if u < v else (v, u)
            key = lo * n_nodes + hi
            if key in seen:
                continue
            seen.add(key)
            chosen.append((lo, hi))
            if len(chosen) == quota:
                break
    return np.array(chosen, dtype=np.int64)
