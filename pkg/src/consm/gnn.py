"""GCN classifier and the confidence-split label-propagation regulariser."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .errors import ContractError, DimensionError
from .graph import TRAIN, SparseAdj
from .matcher import glorot, prune_count
from .numerics import Tensor

log = logging.getLogger(__name__)

# number of dissimilarity calls that hit a zero vector
zero_vector_warnings = 0


@dataclass
class GcnParams:
    weights: list[Tensor]
    biases: list[Tensor]

    @classmethod
    def init(cls, n_features: int, n_classes: int, hidden: int = 64, depth: int = 2, seed: int = 0) -> "GcnParams":
        """``depth`` propagation layers: F->hidden, (hidden->hidden)*, hidden->C. Depth 1 is F->C."""
        if depth < 1:
            raise ContractError("depth must be at least 1")
        rng = np.random.default_rng(seed)
        dims = [n_features] + [hidden] * (depth - 1) + [n_classes]
        weights = [nx.parameter(glorot(rng, a, b), f"W{i}") for i, (a, b) in enumerate(zip(dims, dims[1:]))]
        biases = [nx.parameter(np.zeros((1, b)), f"b{i}") for i, b in enumerate(dims[1:])]
        return cls(weights, biases)

    @property
    def depth(self) -> int:
        return len(self.weights)

    def tensors(self) -> list[Tensor]:
        return self.weights + self.biases

    def snapshot(self) -> list[np.ndarray]:
        return [t.value.copy() for t in self.tensors()]

    def restore(self, arrays: list[np.ndarray]) -> None:
        tensors = self.tensors()
        if len(arrays) != len(tensors):
            raise ContractError("snapshot does not match parameter layout")
        for t, a in zip(tensors, arrays):
            if t.value.shape != a.shape:
                raise DimensionError("restore", t.value.shape, a.shape)
            t.value[...] = a


@dataclass
class GcnOutput:
    log_probs: Tensor
    hidden: list[Tensor]
    preactivations: list[Tensor]

    @property
    def final_hidden(self) -> Tensor:
        """Last hidden layer after ReLU, or the logits when depth is 1."""
        return self.hidden[-1]

    def regularised(self, which: str = "preactivation") -> Tensor:
        """Representation the regulariser acts on.

        Before the ReLU, cosine spans [-1, 1] so d covers [0, 1]; after it
        vectors are non-negative and d cannot exceed 0.5.
        """
        return self.final_hidden if which == "activation" else self.preactivations[-1]


def gcn_forward(a_hat: SparseAdj | np.ndarray, x, params: GcnParams) -> GcnOutput:
    """Repeated H <- A_hat H W + b with ReLU in between and log-softmax at the end.

    ``hidden`` keeps each layer's post-activation output and ``preactivations``
    the matching values before ReLU; for depth 1 both hold the logits.
    """
    mat = a_hat.matrix if isinstance(a_hat, SparseAdj) else a_hat
    h = nx.as_tensor(x)
    hidden, pre = [], []
    n = params.depth
    for layer, (w, b) in enumerate(zip(params.weights, params.biases)):
        if h.shape[1] != w.shape[0]:
            raise DimensionError(f"gcn layer {layer}", h.shape, w.shape)
        h = nx.spmm(mat, h @ w) + b
        if layer < n - 1:
            pre.append(h)
            h = nx.relu(h)
            hidden.append(h)
    logits = h
    if not hidden:
        hidden.append(logits)
        pre.append(logits)
    return GcnOutput(nx.log_softmax(logits), hidden, pre)


def gnn_loss(log_probs: Tensor, labels: np.ndarray, train_mask: np.ndarray) -> Tensor:
    """Mean negative log-likelihood over training nodes."""
    rows = np.flatnonzero(train_mask)
    if rows.size == 0:
        raise ContractError("no training node")
    return -nx.mean(nx.pick(log_probs, rows, labels[rows]))


def dissimilarity(zi, zj) -> float:
    """(1 - cosine) / 2; 0.5 when either vector is zero."""
    zi = np.asarray(zi, dtype=np.float64).ravel()
    zj = np.asarray(zj, dtype=np.float64).ravel()
    ni, nj = np.linalg.norm(zi), np.linalg.norm(zj)
    if ni == 0 or nj == 0:
        global zero_vector_warnings
        zero_vector_warnings += 1
        log.warning("zero vector in dissimilarity; using 0.5")
        return 0.5
    return float((1.0 - zi @ zj / (ni * nj)) / 2.0)


def confidence_threshold(w: np.ndarray, zeta: float) -> float:
    """Largest value outside the top floor(zeta*|E|) coefficients.

    Edges with ``w > threshold`` are the confident ones; with distinct values
    there are exactly floor(zeta*|E|) of them.
    """
    w = np.asarray(w, dtype=np.float64)
    k = prune_count(w.size, zeta)
    if k >= w.size:
        return -np.inf
    return float(np.sort(w)[::-1][k])


@dataclass
class SupTerms:
    """Edge bookkeeping for the regulariser, fixed while a coefficient vector is in use."""

    u: np.ndarray
    v: np.ndarray
    weight: np.ndarray  # alpha * w for confident edges, alpha * (1 - w) otherwise
    confident: np.ndarray
    threshold: float

    @classmethod
    def build(cls, edges: np.ndarray, w: np.ndarray, split: np.ndarray, zeta: float,
              alpha1: float = 1.0, alpha2: float = 0.5) -> "SupTerms":
        edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        w = np.asarray(w, dtype=np.float64)
        if w.shape != (edges.shape[0],):
            raise ContractError("one coefficient per edge is required")
        thr = confidence_threshold(w, zeta)
        labeled = split == TRAIN
        lu, lv = labeled[edges[:, 0]], labeled[edges[:, 1]]
        n_labeled = lu.astype(int) + lv.astype(int)
        include = n_labeled < 2
        alpha = np.where(n_labeled == 1, alpha1, alpha2)
        confident = w > thr
        weight = alpha * np.where(confident, w, 1.0 - w)
        return cls(edges[include, 0], edges[include, 1], weight[include], confident[include], thr)


def sup_loss(terms: SupTerms, hidden: Tensor, reduction: str = "sum") -> Tensor:
    """Sum over LU and UU edges of alpha*w*d for confident edges and alpha*(1-w)*(1-d) for the rest.

    ``reduction="mean"`` divides by the number of included edges.
    """
    if terms.u.size == 0:
        return nx.Tensor(0.0)
    zi = nx.take_rows(hidden, terms.u)
    zj = nx.take_rows(hidden, terms.v)
    d = (1.0 - nx.cosine_rows(zi, zj)) * 0.5
    sign = np.where(terms.confident, 1.0, -1.0).reshape(-1, 1)
    offset = np.where(terms.confident, 0.0, 1.0).reshape(-1, 1)
    per_edge = nx.mul(d, nx.Tensor(sign)) + nx.Tensor(offset)  # d or 1 - d
    out = nx.total(nx.mul(per_edge, nx.Tensor(terms.weight.reshape(-1, 1))))
    return out if reduction == "sum" else out / terms.u.size


def total_loss(log_probs: Tensor, hidden: Tensor, labels: np.ndarray, train_mask: np.ndarray,
               terms: SupTerms | None, lam: float, reduction: str = "sum") -> tuple[Tensor, Tensor, Tensor | None]:
    """L_GNN + lam * L_SUP. Returns (total, gnn part, sup part)."""
    base = gnn_loss(log_probs, labels, train_mask)
    if terms is None or lam == 0:
        return base, base, None
    sup = sup_loss(terms, hidden, reduction)
    return base + sup * lam, base, sup
