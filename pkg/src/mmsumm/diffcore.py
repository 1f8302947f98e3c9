"""Minimal reverse-mode automatic differentiation over dense numpy arrays.

Operations are recorded on a :class:`Graph` tape while one is active and at
least one input depends on a tunable leaf. Outside a graph (or when every
input is constant) ops run eagerly with no bookkeeping, which is what
inference uses.

Example::

    w = Tensor([1.0, 2.0], name="w", tunable=True)
    g = Graph()
    with g:
        loss = sum_(mul(w, w))
    grads = g.backward(loss)      # {"w": array([2., 4.])}
"""

from __future__ import annotations

import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor", "Graph", "NonFiniteError", "GraphError",
    "forward", "backward", "finite_diff_check", "no_grad_enabled",
    "add", "sub", "mul", "scale", "matmul", "relu", "softmax", "log_softmax",
    "layer_norm", "embedding", "cross_entropy", "bce_with_logits", "concat",
    "take", "scatter_add_rows", "mean", "sum_", "reshape", "transpose",
    "dropout",
]


class NonFiniteError(FloatingPointError):
    """Raised when an op produces NaN or Inf."""

    def __init__(self, node_id: int, op: str):
        super().__init__(f"non-finite value produced at node {node_id} ({op})")
        self.node_id = node_id
        self.op = op


class GraphError(RuntimeError):
    pass


_ids = itertools.count()
_active: list["Graph"] = []
check_finite = True


class Tensor:
    """An immutable array node. Leaves may be flagged ``tunable``."""

    __slots__ = ("data", "name", "tunable", "requires_grad", "op", "inputs",
                 "_backward", "id")

    def __init__(self, data, name: str | None = None, tunable: bool = False,
                 dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.name = name
        self.tunable = tunable
        self.requires_grad = tunable
        self.op = "leaf"
        self.inputs: tuple[Tensor, ...] = ()
        self._backward = None
        self.id = next(_ids)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        tag = f" {self.name}" if self.name else ""
        return f"Tensor({self.op}{tag}, shape={self.shape})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


class Graph:
    """A recording tape. Nodes are appended in execution (topological) order."""

    def __init__(self):
        self.nodes: list[Tensor] = []
        self.leaves: dict[int, Tensor] = {}
        self._fn: Callable | None = None

    def __enter__(self):
        _active.append(self)
        return self

    def __exit__(self, *exc):
        _active.pop()
        return False

    def _record(self, out: Tensor, inputs: Sequence[Tensor]):
        for t in inputs:
            if t.tunable and t.op == "leaf":
                self.leaves.setdefault(t.id, t)
        self.nodes.append(out)

    def backward(self, loss: Tensor) -> dict[str, np.ndarray]:
        """Gradients of scalar ``loss`` for every tunable leaf reached."""
        return backward(self, loss)


def no_grad_enabled() -> bool:
    return not _active


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data: np.ndarray, op: str, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.name = None
    out.tunable = False
    out.op = op
    out.id = next(_ids)
    if check_finite and not np.isfinite(data).all():
        raise NonFiniteError(out.id, op)
    if _active and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.inputs = tuple(inputs)
        out._backward = backward_fn
        _active[-1]._record(out, inputs)
    else:
        out.requires_grad = False
        out.inputs = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)
    return _make(a.data + b.data, "add", (a, b), bw)


def sub(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)
    return _make(a.data - b.data, "sub", (a, b), bw)


def mul(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)
    return _make(a.data * b.data, "mul", (a, b), bw)


def scale(a: Tensor, c: float) -> Tensor:
    c = a.dtype.type(c)
    return _make(a.data * c, "scale", (a,), lambda g: (g * c,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(np.where(mask, a.data, a.dtype.type(0)), "relu", (a,),
                 lambda g: (g * mask,))


def dropout(a: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    if rate <= 0.0 or rng is None:
        return a
    keep = (rng.random(a.shape) >= rate).astype(a.dtype) / a.dtype.type(1.0 - rate)
    return _make(a.data * keep, "dropout", (a,), lambda g: (g * keep,))


# ---------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    # 1-d operands are promoted so the swapaxes logic stays uniform
    if a.data.ndim == 1:
        return reshape(matmul(reshape(a, (1, -1)), b), b.shape[:-2] + b.shape[-1:])
    if b.data.ndim == 1:
        return reshape(matmul(a, reshape(b, (-1, 1))), a.shape[:-1])

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)
    return _make(a.data @ b.data, "matmul", (a, b), bw)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _make(a.data.reshape(shape), "reshape", (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    inv = np.argsort(axes)
    return _make(np.transpose(a.data, axes), "transpose", (a,),
                 lambda g: (np.transpose(g, inv),))


def concat(ts: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = list(ts)
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))
    return _make(np.concatenate([t.data for t in ts], axis=axis), "concat", ts, bw)


def take(a: Tensor, index, axis: int = 0) -> Tensor:
    """Gather along ``axis`` (also covers slicing via an index range)."""
    index = np.asarray(index, dtype=np.int64)

    def bw(g):
        out = np.zeros_like(a.data)
        np.add.at(out, (slice(None),) * (axis % a.data.ndim) + (index,), g)
        return (out,)
    return _make(np.take(a.data, index, axis=axis), "take", (a,), bw)


def scatter_add_rows(base: Tensor, rows: Tensor, positions) -> Tensor:
    """``base`` with ``rows[k]`` added at row ``positions[k]`` (positions unique)."""
    positions = np.asarray(positions, dtype=np.int64)
    out = base.data.copy()
    out[positions] += rows.data

    def bw(g):
        return g, g[positions]
    return _make(out, "scatter_add_rows", (base, rows), bw)


def embedding(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)

    def bw(g):
        out = np.zeros_like(table.data)
        np.add.at(out, ids, g)
        return (out,)
    return _make(table.data[ids], "embedding", (table,), bw)


# ---------------------------------------------------------------- reductions

def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)
    return _make(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), "sum", (a,), bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    inv = a.dtype.type(1.0 / n)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g * inv, a.shape).copy(),)
    return _make(np.asarray(a.data.mean(axis=axis, keepdims=keepdims)), "mean", (a,), bw)


# ---------------------------------------------------------------- normalisers

def _softmax_np(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    y = _softmax_np(a.data, axis)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)
    return _make(y, "softmax", (a,), bw)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse
    p = np.exp(y)

    def bw(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)
    return _make(y, "log_softmax", (a,), bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = xc * rstd
    out = xhat * gain.data + bias.data

    def bw(g):
        gx_hat = g * gain.data
        gx = rstd * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                     - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        ggain = _unbroadcast(g * xhat, gain.shape)
        gbias = _unbroadcast(g, bias.shape)
        return gx, ggain, gbias
    return _make(out, "layer_norm", (x, gain, bias), bw)


# ---------------------------------------------------------------- losses

def cross_entropy(logits: Tensor, targets, smoothing: float = 0.0,
                  weights=None) -> Tensor:
    """Mean label-smoothed NLL over rows of ``logits`` (rows x V).

    Per row: ``(1-eps) * -log p[target] + eps * mean_w(-log p[w])``.
    ``weights`` (0/1 per row) excludes rows from the mean.
    """
    targets = np.asarray(targets, dtype=np.int64)
    x = logits.data
    z = x - x.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    rows = np.arange(x.shape[0])
    nll = -logp[rows, targets]
    smooth = -logp.mean(axis=-1)
    per_row = (1.0 - smoothing) * nll + smoothing * smooth
    w = np.ones(x.shape[0], dtype=x.dtype) if weights is None else np.asarray(weights, dtype=x.dtype)
    denom = w.sum()
    if denom <= 0:
        raise GraphError("cross_entropy over zero rows")
    loss = np.asarray((per_row * w).sum() / denom, dtype=x.dtype)
    V = x.shape[-1]

    def bw(g):
        p = np.exp(logp)
        target_dist = np.full_like(x, smoothing / V)
        target_dist[rows, targets] += 1.0 - smoothing
        grad = (p - target_dist) * (w / denom)[:, None]
        return (grad * g,)
    return _make(loss, "cross_entropy", (logits,), bw)


def bce_with_logits(logits: Tensor, labels) -> Tensor:
    """Mean binary cross-entropy of ``sigmoid(logits)`` against 0/1 labels."""
    y = np.asarray(labels, dtype=logits.dtype)
    x = logits.data
    # log(1 + exp(-|x|)) formulation is stable for large |x|
    loss_el = np.maximum(x, 0) - x * y + np.log1p(np.exp(-np.abs(x)))
    loss = np.asarray(loss_el.mean(), dtype=x.dtype)
    sig = 1.0 / (1.0 + np.exp(-x))

    def bw(g):
        return ((sig - y) / x.size * g,)
    return _make(loss, "bce_with_logits", (logits,), bw)


# ---------------------------------------------------------------- graph API

def forward(graph: Graph, fn: Callable, **inputs):
    """Run ``fn(**inputs)`` while recording onto ``graph``."""
    graph._fn = fn
    with graph:
        return fn(**inputs)


def backward(graph: Graph, loss: Tensor) -> dict[str, np.ndarray]:
    if loss.data.size != 1:
        raise GraphError(f"loss must be scalar, got shape {loss.shape}")
    if loss.op == "leaf":
        return {loss.name: np.ones_like(loss.data)} if loss.tunable else {}
    if not loss.requires_grad:
        return {leaf.name: np.zeros_like(leaf.data) for leaf in graph.leaves.values()}
    if not graph.nodes or graph.nodes[-1].id != loss.id and loss.id not in {n.id for n in graph.nodes}:
        raise GraphError("backward called before forward on this graph")
    grads: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        g = grads.pop(node.id, None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node._backward(g)):
            if not inp.requires_grad or gi is None:
                continue
            prev = grads.get(inp.id)
            grads[inp.id] = gi if prev is None else prev + gi
    out = {}
    for leaf in graph.leaves.values():
        g = grads.get(leaf.id)
        out[leaf.name] = g if g is not None else np.zeros_like(leaf.data)
    return out


def finite_diff_check(loss_fn: Callable[[], Tensor], leaves: Iterable[Tensor],
                      eps: float = 1e-5, tol: float = 1e-4) -> dict:
    """Compare analytic gradients with central differences for every scalar.

    ``loss_fn`` builds the scalar loss from the current leaf values. Returns
    ``{"max_rel_error", "worst_leaf", "n_checked", "per_leaf", "ok"}``.
    """
    if not 0.0 < eps <= 1e-3:
        raise ValueError("eps must lie in (0, 1e-3]")
    leaves = [t for t in leaves if t.tunable]
    report = {"max_rel_error": 0.0, "worst_leaf": None, "n_checked": 0,
              "per_leaf": {}, "ok": True}
    if not leaves:
        return report
    for t in leaves:
        if t.dtype != np.float64:
            raise ValueError(f"leaf {t.name} is {t.dtype}; gradient checks need float64")
    g = Graph()
    with g:
        loss = loss_fn()
    analytic = g.backward(loss)
    for t in leaves:
        a_grad = analytic.get(t.name, np.zeros_like(t.data))
        flat = t.data.reshape(-1)
        worst = 0.0
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + eps
            lp = float(loss_fn().data)
            flat[k] = orig - eps
            lm = float(loss_fn().data)
            flat[k] = orig
            if not (np.isfinite(lp) and np.isfinite(lm)):
                raise NonFiniteError(-1, f"perturbation of {t.name}[{k}]")
            num = (lp - lm) / (2 * eps)
            a = float(a_grad.reshape(-1)[k])
            rel = abs(a - num) / max(abs(a), abs(num), 1e-12)
            worst = max(worst, rel)
        report["per_leaf"][t.name] = worst
        report["n_checked"] += flat.size
        if report["worst_leaf"] is None or worst > report["max_rel_error"]:
            report["max_rel_error"] = worst
            report["worst_leaf"] = t.name
    report["ok"] = report["max_rel_error"] < tol
    return report
