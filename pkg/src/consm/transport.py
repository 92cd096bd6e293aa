"""Optimal-transport kernels between a node set and a set of reference points.

Plans are stored reference-major: ``plan[c, l]`` is the mass moved from node
``l`` to reference ``c``, so a plan has shape (C, m).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .errors import ContractError, DimensionError, NumericalError


@dataclass
class TransportPlan:
    matrix: np.ndarray
    mode: str  # "coupling" or "assignment"
    converged: bool = True
    n_iter: int = 0
    marginal_error: float = 0.0

    @property
    def n_refs(self) -> int:
        return self.matrix.shape[0]

    @property
    def n_nodes(self) -> int:
        return self.matrix.shape[1]

    def cost(self, cost: np.ndarray) -> float:
        """<cost, P> with ``cost`` laid out node-major (m, C)."""
        return float((cost.T * self.matrix).sum())


def squared_distances(h: np.ndarray, r: np.ndarray) -> np.ndarray:
    """(m, C) matrix of ||h_l - r_c||^2."""
    h = np.asarray(h, dtype=np.float64)
    r = np.asarray(r, dtype=np.float64)
    if h.ndim != 2 or r.ndim != 2 or h.shape[1] != r.shape[1]:
        raise DimensionError("squared_distances", h.shape, r.shape)
    d = (h * h).sum(1)[:, None] - 2.0 * h @ r.T + (r * r).sum(1)[None, :]
    return np.maximum(d, 0.0)


def sinkhorn(cost: np.ndarray, eps: float = 0.1, max_iters: int = 50, tol: float = 1e-6) -> TransportPlan:
    """Entropic OT between m nodes (mass 1/m each) and C references (mass 1/C each).

    ``cost`` is node-major (m, C). Iterates in the log domain; the returned plan
    is (C, m).
    """
    cost = np.asarray(cost, dtype=np.float64)
    if eps <= 0:
        raise ContractError("eps must be positive")
    if max_iters < 1:
        raise ContractError("max_iters must be at least 1")
    if cost.ndim != 2 or cost.size == 0:
        raise DimensionError("sinkhorn", cost.shape)
    if not np.isfinite(cost).all():
        raise NumericalError("sinkhorn: cost matrix is not finite")
    m, c = cost.shape
    log_a = np.full(m, -np.log(m))
    log_b = np.full(c, -np.log(c))
    log_k = -cost / eps
    f = np.zeros(m)
    g = np.zeros(c)
    err = np.inf
    it = 0
    for it in range(1, max_iters + 1):
        f = log_a - logsumexp(log_k + g[None, :], axis=1)
        g = log_b - logsumexp(log_k + f[:, None], axis=0)
        log_p = log_k + f[:, None] + g[None, :]
        # columns are exact after the g-update; only node marginals can drift
        err = float(np.abs(np.exp(logsumexp(log_p, axis=1)) - 1.0 / m).max())
        if err < tol:
            break
    plan = np.exp(log_k + f[:, None] + g[None, :]).T
    if not np.isfinite(plan).all() or not np.isfinite(err):
        raise NumericalError(f"sinkhorn diverged at eps={eps}; use a larger eps")
    return TransportPlan(plan, "coupling", converged=err < tol, n_iter=it, marginal_error=err)


def marginal_violation(plan: TransportPlan) -> float:
    m, c = plan.n_nodes, plan.n_refs
    p = plan.matrix
    return float(max(np.abs(p.sum(axis=0) - 1.0 / m).max(), np.abs(p.sum(axis=1) - 1.0 / c).max()))


def nearest_reference(h: np.ndarray, r: np.ndarray) -> np.ndarray:
    """Index of the closest reference per node; ties go to the lowest index."""
    return np.argmin(squared_distances(h, r), axis=1)


def assign(h: np.ndarray, r: np.ndarray) -> TransportPlan:
    """Hard no-splitting plan: each node sends its whole mass 1/m to its nearest reference."""
    h = np.atleast_2d(np.asarray(h, dtype=np.float64))
    r = np.atleast_2d(np.asarray(r, dtype=np.float64))
    if h.shape[0] < 1 or r.shape[0] < 1:
        raise ContractError("assign needs at least one node and one reference")
    idx = nearest_reference(h, r)
    m = h.shape[0]
    plan = np.zeros((r.shape[0], m))
    plan[idx, np.arange(m)] = 1.0 / m
    return TransportPlan(plan, "assignment")


def barycentric_weights(plan: TransportPlan | np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-normalised plan and the occupancy mask; empty rows stay zero."""
    p = plan.matrix if isinstance(plan, TransportPlan) else np.asarray(plan, dtype=np.float64)
    mass = p.sum(axis=1, keepdims=True)
    occupied = mass[:, 0] > 0
    weights = np.divide(p, mass, out=np.zeros_like(p), where=mass > 0)
    return weights, occupied


def barycentric_project(plan: TransportPlan | np.ndarray, h: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-reference mass-weighted mean of node embeddings, shape (C, F), with occupancy mask."""
    weights, occupied = barycentric_weights(plan)
    h = np.asarray(h, dtype=np.float64)
    if weights.shape[1] != h.shape[0]:
        raise DimensionError("barycentric_project", weights.shape, h.shape)
    return weights @ h, occupied


def linear_ot_pool(plan: TransportPlan | np.ndarray, h: np.ndarray) -> np.ndarray:
    """Mass-splitting pooled embedding ``plan @ h`` without renormalisation."""
    p = plan.matrix if isinstance(plan, TransportPlan) else np.asarray(plan, dtype=np.float64)
    h = np.asarray(h, dtype=np.float64)
    if p.shape[1] != h.shape[0]:
        raise DimensionError("linear_ot_pool", p.shape, h.shape)
    return p @ h
