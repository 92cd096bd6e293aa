"""Dense matrices with tape-based reverse-mode differentiation, plus Adam.

Every value is a 2-D float64 numpy array. Operations are recorded on the
innermost active :class:`Tape`; outside a tape they evaluate eagerly and
nothing is retained, which is how inference paths avoid bookkeeping.

    with Tape() as tape:
        loss = mean(relu(x @ w))
    grads = tape.gradient(loss, [w])
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import ContractError, DimensionError, NumericalError, OptimizerError

_local = threading.local()


def _active_tape() -> "Tape | None":
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tensor:
    """A matrix value, optionally a node of the computation graph."""

    __slots__ = ("value", "requires_grad", "name", "parents", "backward_fn", "op")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(value, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise DimensionError("tensor", arr.shape)
        self.value = arr
        self.requires_grad = requires_grad
        self.name = name
        self.parents: tuple[Tensor, ...] = ()
        self.backward_fn: Callable | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    def item(self) -> float:
        if self.value.shape != (1, 1):
            raise ContractError(f"item() on non-scalar of shape {self.value.shape}")
        return float(self.value[0, 0])

    def numpy(self) -> np.ndarray:
        return self.value

    def __repr__(self):
        label = self.name or self.op
        return f"Tensor({label}, shape={self.value.shape})"

    def __add__(self, other):
        return add(self, as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, as_tensor(other))

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, as_tensor(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if not np.isscalar(other):
            raise TypeError("only scalar division is supported")
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, as_tensor(other))


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(value, name: str | None = None) -> Tensor:
    """A trainable leaf. The array is copied so callers keep theirs."""
    return Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=name)


class Tape:
    """Records operations in execution order; replayed backwards by :meth:`gradient`.

    Not thread-safe: one tape belongs to one trainer.
    """

    def __init__(self):
        self.nodes: list[Tensor] = []

    def __enter__(self):
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _local.stack.pop()
        return False

    def record(self, node: Tensor) -> None:
        self.nodes.append(node)

    def gradient(self, loss: Tensor, params: Sequence[Tensor]) -> list[np.ndarray]:
        """d loss / d param for each of ``params``; zeros for parameters the loss ignores."""
        if loss.value.shape != (1, 1):
            raise ContractError(f"backward requires a 1x1 output, got {loss.value.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones((1, 1))}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None or node.backward_fn is None:
                continue
            for parent, pg in zip(node.parents, node.backward_fn(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        out = []
        for p in params:
            g = grads.get(id(p))
            out.append(np.zeros_like(p.value) if g is None else np.asarray(g, dtype=np.float64))
        return out


def _check_finite(op: str, value: np.ndarray) -> None:
    if not np.isfinite(value).all():
        raise NumericalError(f"{op} produced non-finite values")


def _make(op: str, value: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    _check_finite(op, value)
    out = Tensor.__new__(Tensor)
    out.value = value
    out.name = None
    out.op = op
    out.parents = ()
    out.backward_fn = None
    out.requires_grad = False
    tape = _active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = parents
        out.backward_fn = backward_fn
        tape.record(out)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape[0] == 1 and g.shape[0] != 1:
        g = g.sum(axis=0, keepdims=True)
    if shape[1] == 1 and g.shape[1] != 1:
        g = g.sum(axis=1, keepdims=True)
    return g


def _broadcastable(op: str, a: Tensor, b: Tensor) -> None:
    (ra, ca), (rb, cb) = a.shape, b.shape
    if (ra == rb or ra == 1 or rb == 1) and (ca == cb or ca == 1 or cb == 1):
        return
    raise DimensionError(op, a.shape, b.shape)


# -- binary ----------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[1] != b.shape[0]:
        raise DimensionError("matmul", a.shape, b.shape)
    av, bv = a.value, b.value
    return _make("matmul", av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcastable("add", a, b)
    sa, sb = a.shape, b.shape
    return _make("add", a.value + b.value, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcastable("sub", a, b)
    sa, sb = a.shape, b.shape
    return _make("sub", a.value - b.value, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcastable("mul", a, b)
    av, bv = a.value, b.value
    return _make("mul", av * bv, (a, b),
                 lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def scale(a: Tensor, c: float) -> Tensor:
    return _make("scale", a.value * c, (a,), lambda g: (g * c,))


def spmm(A, x: Tensor) -> Tensor:
    """Left-multiply by a constant matrix (scipy sparse or dense array); no gradient for ``A``."""
    if A.shape[1] != x.shape[0]:
        raise DimensionError("spmm", A.shape, x.shape)
    At = A.T.tocsr() if sp.issparse(A) else A.T
    value = np.asarray(A @ x.value)
    return _make("spmm", value, (x,), lambda g: (np.asarray(At @ g),))


# -- elementwise -----------------------------------------------------------


def relu(a: Tensor) -> Tensor:
    mask = a.value > 0
    return _make("relu", np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,))


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.value)
    return _make("tanh", t, (a,), lambda g: (g * (1.0 - t * t),))


def sigmoid(a: Tensor) -> Tensor:
    x = a.value
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    s = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _make("sigmoid", s, (a,), lambda g: (g * s * (1.0 - s),))


def log(a: Tensor) -> Tensor:
    if (a.value <= 0).any():
        raise NumericalError("log of non-positive entry")
    av = a.value
    return _make("log", np.log(av), (a,), lambda g: (g / av,))


def absolute(a: Tensor) -> Tensor:
    sgn = np.sign(a.value)
    return _make("abs", np.abs(a.value), (a,), lambda g: (g * sgn,))


# -- structural ------------------------------------------------------------


def concat(items: Sequence[Tensor], axis: int = 1) -> Tensor:
    other = 1 - axis
    base = items[0].shape[other]
    for t in items[1:]:
        if t.shape[other] != base:
            raise DimensionError("concat", *(x.shape for x in items))
    sizes = [t.shape[axis] for t in items]
    cuts = np.cumsum(sizes)[:-1]
    value = np.concatenate([t.value for t in items], axis=axis)
    return _make("concat", value, tuple(items), lambda g: tuple(np.split(g, cuts, axis=axis)))


def reshape(a: Tensor, rows: int, cols: int) -> Tensor:
    if rows * cols != a.value.size:
        raise DimensionError("reshape", a.shape, (rows, cols))
    shape = a.shape
    return _make("reshape", a.value.reshape(rows, cols), (a,), lambda g: (g.reshape(shape),))


def take_rows(a: Tensor, index) -> Tensor:
    idx = np.asarray(index, dtype=np.int64)
    shape = a.shape

    def back(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return _make("take_rows", a.value[idx], (a,), back)


def pick(a: Tensor, rows, cols) -> Tensor:
    """Column vector of ``a[rows[i], cols[i]]``."""
    r = np.asarray(rows, dtype=np.int64)
    c = np.asarray(cols, dtype=np.int64)
    shape = a.shape

    def back(g):
        out = np.zeros(shape)
        np.add.at(out, (r, c), g[:, 0])
        return (out,)

    return _make("pick", a.value[r, c].reshape(-1, 1), (a,), back)


# -- reductions ------------------------------------------------------------


def total(a: Tensor) -> Tensor:
    shape = a.shape
    return _make("sum", np.array([[a.value.sum()]]), (a,), lambda g: (np.full(shape, g[0, 0]),))


def mean(a: Tensor) -> Tensor:
    shape = a.shape
    n = a.value.size
    return _make("mean", np.array([[a.value.mean()]]), (a,),
                 lambda g: (np.full(shape, g[0, 0] / n),))


def row_sum(a: Tensor) -> Tensor:
    shape = a.shape
    return _make("row_sum", a.value.sum(axis=1, keepdims=True), (a,),
                 lambda g: (np.broadcast_to(g, shape).copy(),))


def l1_distance(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError("l1_distance", a.shape, b.shape)
    return total(absolute(sub(a, b)))


# -- row-wise normalisers --------------------------------------------------


def row_softmax(a: Tensor) -> Tensor:
    z = a.value - a.value.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)

    def back(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return _make("row_softmax", s, (a,), back)


def log_softmax(a: Tensor) -> Tensor:
    z = a.value - a.value.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    out = z - lse
    s = np.exp(out)

    def back(g):
        return (g - s * g.sum(axis=1, keepdims=True),)

    return _make("log_softmax", out, (a,), back)


def cosine_rows(a: Tensor, b: Tensor) -> Tensor:
    """Column vector of cosine(a_i, b_i). Rows with zero norm give cosine 0 and no gradient."""
    if a.shape != b.shape:
        raise DimensionError("cosine_rows", a.shape, b.shape)
    av, bv = a.value, b.value
    na = np.sqrt((av * av).sum(axis=1, keepdims=True))
    nb = np.sqrt((bv * bv).sum(axis=1, keepdims=True))
    ok = (na > 0) & (nb > 0)
    na_s = np.where(ok, na, 1.0)
    nb_s = np.where(ok, nb, 1.0)
    dot = (av * bv).sum(axis=1, keepdims=True)
    cos = np.where(ok, dot / (na_s * nb_s), 0.0)

    def back(g):
        g = np.where(ok, g, 0.0)
        ga = g * (bv / (na_s * nb_s) - cos * av / (na_s * na_s))
        gb = g * (av / (na_s * nb_s) - cos * bv / (nb_s * nb_s))
        return ga, gb

    return _make("cosine_rows", cos, (a, b), back)


# -- optimiser -------------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 1e-3
    weight_decay: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: AdamState) -> Sequence[Tensor]:
    """One Adam update in place. Weight decay is folded into the gradient as an L2 term."""
    if len(params) != len(grads):
        raise ContractError(f"{len(params)} parameters but {len(grads)} gradients")
    for i, (p, g) in enumerate(zip(params, grads)):
        if g.shape != p.value.shape:
            raise DimensionError("adam_step", p.value.shape, g.shape)
        if not np.isfinite(g).all():
            raise OptimizerError(p.name or f"#{i}")
    if not state.m:
        state.m = [np.zeros_like(p.value) for p in params]
        state.v = [np.zeros_like(p.value) for p in params]
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if state.weight_decay:
            g = g + state.weight_decay * p.value
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.value -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params


class Adam:
    """Thin stateful wrapper around :func:`adam_step`."""

    def __init__(self, params: Sequence[Tensor], lr=1e-3, weight_decay=5e-4,
                 betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.state = AdamState(lr=lr, weight_decay=weight_decay,
                               beta1=betas[0], beta2=betas[1], eps=eps)

    def step(self, grads: Sequence[np.ndarray]) -> None:
        adam_step(self.params, grads, self.state)


# -- testing aid -----------------------------------------------------------


def finite_diff_check(loss_fn: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5,
                      max_coords: int | None = None, seed: int = 0) -> float:
    """Max over (sampled) coordinates of |autodiff - central difference| / max(1, |central|).

    ``loss_fn`` rebuilds the scalar loss from the current parameter values.
    """
    if h <= 0:
        raise ContractError("h must be positive")
    with Tape() as tape:
        loss = loss_fn()
    grads = tape.gradient(loss, params)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p, g in zip(params, grads):
        flat = p.value.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        for k in coords:
            orig = flat[k]
            flat[k] = orig + h
            up = loss_fn().item()
            flat[k] = orig - h
            down = loss_fn().item()
            flat[k] = orig
            fd = (up - down) / (2 * h)
            err = abs(g.reshape(-1)[k] - fd) / max(1.0, abs(fd))
            worst = max(worst, err)
    return worst
