"""Define-by-run reverse-mode autodiff over numpy arrays.

Every differentiable op records a :class:`Node` holding its inputs and a
backward closure. Backward closures are written with the same ``Tensor`` ops
as the forward pass, so running :func:`backward` with ``create_graph=True``
records a graph for the gradients themselves and they can be differentiated
again. This is what makes differentiating through an optimizer step possible.

Gradient contributions are accumulated in a fixed order (descending node
creation order), so two backward passes over the same graph give bit-identical
results.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.polynomial import hermite_e
from scipy import special

__all__ = [
    "Tensor",
    "Node",
    "GraphReleasedError",
    "NonDeterministicError",
    "backward",
    "detach",
    "leaf_proxy",
    "finite_diff_check",
    "no_grad",
    "enable_grad",
    "is_grad_enabled",
    "precision",
    "get_default_dtype",
    "set_default_dtype",
    "graph_census",
    "reset_peak_nodes",
    "count_graph_nodes",
]


class GraphReleasedError(RuntimeError):
    """Backward reached a node whose saved state was already freed."""


class NonDeterministicError(RuntimeError):
    """A function under finite-difference check returned different values for the same input."""


# --------------------------------------------------------------------------
# global state

_local = threading.local()
_seq = itertools.count()
_census = {"live": 0, "peak": 0, "live_elems": 0, "peak_elems": 0}
_default_dtype = [np.dtype(np.float32)]


def is_grad_enabled() -> bool:
    return getattr(_local, "grad", True)


@contextmanager
def _grad_mode(flag: bool):
    prev = is_grad_enabled()
    _local.grad = flag
    try:
        yield
    finally:
        _local.grad = prev


def no_grad():
    """Context manager: ops inside record no graph."""
    return _grad_mode(False)


def enable_grad():
    return _grad_mode(True)


def get_default_dtype() -> np.dtype:
    return _default_dtype[0]


def set_default_dtype(dtype) -> None:
    _default_dtype[0] = np.dtype(dtype)


@contextmanager
def precision(dtype):
    """Temporarily switch the dtype used for new float tensors."""
    prev = _default_dtype[0]
    _default_dtype[0] = np.dtype(dtype)
    try:
        yield
    finally:
        _default_dtype[0] = prev


def graph_census() -> dict[str, int]:
    """Live (unreleased) graph nodes and the peak since the last reset, plus
    the same two counts weighted by the element count of each node's output."""
    return dict(_census)


def reset_peak_nodes() -> None:
    _census["peak"] = _census["live"]
    _census["peak_elems"] = _census["live_elems"]


# --------------------------------------------------------------------------
# core types


class Node:
    __slots__ = ("op", "inputs", "backward_fn", "seq", "retained", "size")

    def __init__(self, op: str, inputs: tuple, backward_fn: Callable, size: int = 1):
        self.op = op
        self.inputs = inputs
        self.backward_fn = backward_fn
        self.seq = next(_seq)
        self.retained = True
        self.size = size
        _census["live"] += 1
        _census["live_elems"] += size
        if _census["live"] > _census["peak"]:
            _census["peak"] = _census["live"]
        if _census["live_elems"] > _census["peak_elems"]:
            _census["peak_elems"] = _census["live_elems"]

    def _drop(self) -> None:
        _census["live"] -= 1
        _census["live_elems"] -= self.size

    def release(self) -> None:
        if self.retained:
            self.retained = False
            self.inputs = ()
            self.backward_fn = None
            self._drop()

    def __del__(self):
        if self.retained:
            self._drop()

    def __repr__(self):
        return f"Node({self.op}, seq={self.seq}, retained={self.retained})"


class Tensor:
    """An n-d array with an optional reference to the node that produced it."""

    __slots__ = ("data", "requires_grad", "node")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype.kind != "f" or not isinstance(data, np.ndarray):
            arr = arr.astype(get_default_dtype())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.node: Node | None = None

    # basic properties
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def __len__(self):
        return len(self.data)

    # operators
    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(_const(o, self), self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(_const(o, self), self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(_const(o, self), self)

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(_const(o, self), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, o):
        return matmul(self, o)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def swapaxes(self, a, b):
        return swapaxes(self, a, b)

    @property
    def T(self):
        return swapaxes(self, -1, -2)


def _const(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype))


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _make(data: np.ndarray, inputs: tuple, op: str, backward_fn: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.node = None
    out.requires_grad = False
    if is_grad_enabled():
        for t in inputs:
            if t.requires_grad:
                out.requires_grad = True
                out.node = Node(op, inputs, backward_fn, int(np.size(data)))
                break
    return out


# --------------------------------------------------------------------------
# shape helpers


def _reduce_axes(in_shape: tuple, out_shape: tuple) -> tuple[tuple, tuple]:
    """Axes of ``in_shape`` to sum so that the result broadcasts back from ``out_shape``."""
    lead = len(in_shape) - len(out_shape)
    lead_axes = tuple(range(lead))
    keep_axes = tuple(
        i + lead for i, s in enumerate(out_shape) if s == 1 and in_shape[i + lead] != 1
    )
    return lead_axes, keep_axes


def sum_to(x: Tensor, shape: tuple) -> Tensor:
    """Sum ``x`` down to a shape it was broadcast from."""
    shape = tuple(shape)
    if x.shape == shape:
        return x
    lead_axes, keep_axes = _reduce_axes(x.shape, shape)
    data = x.data
    if keep_axes:
        data = data.sum(axis=keep_axes, keepdims=True)
    if lead_axes:
        data = data.sum(axis=lead_axes)
    in_shape = x.shape

    def bw(out, g, needs):
        return (broadcast_to(g, in_shape),)

    return _make(data.reshape(shape), (x,), "sum_to", bw)


def broadcast_to(x: Tensor, shape: tuple) -> Tensor:
    shape = tuple(shape)
    if x.shape == shape:
        return x
    in_shape = x.shape

    def bw(out, g, needs):
        return (sum_to(g, in_shape),)

    return _make(np.broadcast_to(x.data, shape), (x,), "broadcast_to", bw)


# --------------------------------------------------------------------------
# elementwise binary


def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = _const(b, a)

    def bw(out, g, needs):
        return (
            sum_to(g, a.shape) if needs[0] else None,
            sum_to(g, b.shape) if needs[1] else None,
        )

    return _make(a.data + b.data, (a, b), "add", bw)


def sub(a, b) -> Tensor:
    a = as_tensor(a)
    b = _const(b, a)

    def bw(out, g, needs):
        return (
            sum_to(g, a.shape) if needs[0] else None,
            sum_to(neg(g), b.shape) if needs[1] else None,
        )

    return _make(a.data - b.data, (a, b), "sub", bw)


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    b = _const(b, a)

    def bw(out, g, needs):
        return (
            sum_to(mul(g, b), a.shape) if needs[0] else None,
            sum_to(mul(g, a), b.shape) if needs[1] else None,
        )

    return _make(a.data * b.data, (a, b), "mul", bw)


def div(a, b) -> Tensor:
    a = as_tensor(a)
    b = _const(b, a)

    def bw(out, g, needs):
        ga = gb = None
        if needs[0]:
            ga = sum_to(div(g, b), a.shape)
        if needs[1]:
            gb = sum_to(neg(mul(g, div(out, b))), b.shape)
        return ga, gb

    return _make(a.data / b.data, (a, b), "div", bw)


def neg(a: Tensor) -> Tensor:
    def bw(out, g, needs):
        return (neg(g),)

    return _make(-a.data, (a,), "neg", bw)


def power(a: Tensor, p: float) -> Tensor:
    p = float(p)

    def bw(out, g, needs):
        if p == 1.0:
            return (g,)
        return (mul(g, mul(power(a, p - 1.0), p)),)

    return _make(a.data ** p, (a,), "pow", bw)


# --------------------------------------------------------------------------
# elementwise unary


def exp(a: Tensor) -> Tensor:
    def bw(out, g, needs):
        return (mul(g, out),)

    return _make(np.exp(a.data), (a,), "exp", bw)


def log(a: Tensor) -> Tensor:
    def bw(out, g, needs):
        return (div(g, a),)

    return _make(np.log(a.data), (a,), "log", bw)


def sin(a: Tensor) -> Tensor:
    def bw(out, g, needs):
        return (mul(g, cos(a)),)

    return _make(np.sin(a.data), (a,), "sin", bw)


def cos(a: Tensor) -> Tensor:
    def bw(out, g, needs):
        return (neg(mul(g, sin(a))),)

    return _make(np.cos(a.data), (a,), "cos", bw)


def tanh(a: Tensor) -> Tensor:
    def bw(out, g, needs):
        return (mul(g, sub(1.0, mul(out, out))),)

    return _make(np.tanh(a.data), (a,), "tanh", bw)


def sigmoid(a: Tensor) -> Tensor:
    def bw(out, g, needs):
        return (mul(g, mul(out, sub(1.0, out))),)

    return _make(special.expit(a.data), (a,), "sigmoid", bw)


def softplus(a: Tensor) -> Tensor:
    def bw(out, g, needs):
        return (mul(g, sigmoid(a)),)

    return _make(np.logaddexp(0.0, a.data).astype(a.dtype, copy=False), (a,), "softplus", bw)


def reciprocal_safe(a: Tensor) -> Tensor:
    """1/a with the convention 1/0 = 0 (value and all derivatives)."""
    with np.errstate(divide="ignore"):
        data = np.where(a.data == 0, 0.0, 1.0 / a.data).astype(a.dtype, copy=False)

    def bw(out, g, needs):
        return (neg(mul(g, mul(out, out))),)

    return _make(data, (a,), "reciprocal_safe", bw)


def sqrt(a: Tensor) -> Tensor:
    """Square root whose derivative at 0 is taken as 0 instead of inf.

    Adam's second moment is exactly zero for parameters with zero gradient
    (e.g. LoRA ``A`` while ``B == 0``); the masked derivative keeps the
    differentiable update free of ``0 * inf``.
    """

    def bw(out, g, needs):
        return (mul(g, mul(reciprocal_safe(out), 0.5)),)

    return _make(np.sqrt(a.data), (a,), "sqrt", bw)


_SQRT_2PI = np.sqrt(2.0 * np.pi)


def _gelu_derivative(x: np.ndarray, k: int) -> np.ndarray:
    # d^k/dx^k [x Phi(x)] = x Phi^(k)(x) + k Phi^(k-1)(x),
    # Phi^(m) = (-1)^(m-1) He_{m-1}(x) pdf(x) for m >= 1.
    # Orders up to 4 use the expanded polynomials, which are much cheaper.
    if k == 0:
        return x * special.ndtr(x)
    pdf = np.exp(-0.5 * x * x) / np.asarray(_SQRT_2PI, dtype=x.dtype)
    if k == 1:
        return special.ndtr(x) + x * pdf
    x2 = x * x
    if k == 2:
        return pdf * (2.0 - x2)
    if k == 3:
        return pdf * x * (x2 - 4.0)
    if k == 4:
        return pdf * ((7.0 - x2) * x2 - 4.0)

    def cdf_deriv(m):
        coef = np.zeros(m)
        coef[m - 1] = 1.0
        return (-1) ** (m - 1) * hermite_e.hermeval(x, coef) * pdf

    return x * cdf_deriv(k) + k * cdf_deriv(k - 1)


def gelu(a: Tensor, order: int = 0) -> Tensor:
    """Exact (erf) GELU, or its ``order``-th derivative; differentiable to any order."""

    def bw(out, g, needs):
        return (mul(g, gelu(a, order + 1)),)

    data = _gelu_derivative(a.data, order).astype(a.dtype, copy=False)
    return _make(data, (a,), "gelu" if order == 0 else f"gelu_d{order}", bw)


# --------------------------------------------------------------------------
# reductions / shape ops


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    in_shape = a.shape
    kept = tuple(1 if i in axes else s for i, s in enumerate(in_shape))

    def bw(out, g, needs):
        return (broadcast_to(reshape(g, kept), in_shape),)

    data = a.data.sum(axis=axes, keepdims=keepdims)
    return _make(np.asarray(data), (a,), "sum", bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    n = 1
    for i in axes:
        n *= a.shape[i]
    return mul(tsum(a, axis, keepdims), 1.0 / n)


def seq_sum(a: Tensor) -> Tensor:
    """Sum over axis 0 in strictly ascending index order.

    Used for reproducible accumulation: the result only depends on the
    per-slice values, not on how the slices were batched.
    """
    acc = a.data[0].copy()
    for i in range(1, a.shape[0]):
        acc += a.data[i]
    in_shape = a.shape

    def bw(out, g, needs):
        return (broadcast_to(reshape(g, (1,) + g.shape), in_shape),)

    return _make(acc, (a,), "seq_sum", bw)


def reshape(a: Tensor, shape) -> Tensor:
    in_shape = a.shape

    def bw(out, g, needs):
        return (reshape(g, in_shape),)

    return _make(a.data.reshape(shape), (a,), "reshape", bw)


def swapaxes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    def bw(out, g, needs):
        return (swapaxes(g, ax1, ax2),)

    return _make(np.swapaxes(a.data, ax1, ax2), (a,), "swapaxes", bw)


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def bw(out, g, needs):
        return (transpose(g, inv),)

    return _make(np.transpose(a.data, axes), (a,), "transpose", bw)


def _is_basic(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(p is None or p is Ellipsis or isinstance(p, (int, np.integer, slice)) for p in parts)


def getitem(a: Tensor, idx, unique: bool | None = None) -> Tensor:
    """``a[idx]``. ``unique`` promises that no element is selected twice, which
    lets the backward pass write instead of scatter-add (basic indexing is
    always unique)."""
    in_shape = a.shape
    if unique is None:
        unique = _is_basic(idx)

    def bw(out, g, needs):
        return (index_put(g, idx, in_shape, unique),)

    return _make(a.data[idx], (a,), "getitem", bw)


def index_put(g: Tensor, idx, shape: tuple, unique: bool = False) -> Tensor:
    """Zeros of ``shape`` with ``g`` added at ``idx`` (adjoint of getitem)."""
    data = np.zeros(shape, dtype=g.dtype)
    if unique:
        data[idx] = g.data
    else:
        np.add.at(data, idx, g.data)

    def bw(out, gg, needs):
        return (getitem(gg, idx, unique),)

    return _make(data, (g,), "index_put", bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    axis = axis % tensors[0].ndim
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def bw(out, g, needs):
        grads = []
        for i, need in enumerate(needs):
            if not need:
                grads.append(None)
                continue
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(int(bounds[i]), int(bounds[i + 1]))
            grads.append(getitem(g, tuple(sl)))
        return tuple(grads)

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, "concat", bw)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in tensors]
    return concat(tensors, axis)


def take_rows(table: Tensor, ids: np.ndarray) -> Tensor:
    """Embedding lookup ``table[ids]``."""
    ids = np.asarray(ids)
    n_rows = table.shape[0]

    def bw(out, g, needs):
        return (scatter_rows(g, ids, n_rows),)

    return _make(table.data[ids], (table,), "take_rows", bw)


def scatter_rows(g: Tensor, ids: np.ndarray, n_rows: int) -> Tensor:
    width = g.shape[ids.ndim:]
    data = np.zeros((n_rows,) + width, dtype=g.dtype)
    np.add.at(data, ids.reshape(-1), g.data.reshape((-1,) + width))

    def bw(out, gg, needs):
        return (take_rows(gg, ids),)

    return _make(data, (g,), "scatter_rows", bw)


# --------------------------------------------------------------------------
# linear algebra and normalised exponentials


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a = as_tensor(a)
    b = _const(b, a)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul needs operands with at least 2 dimensions")

    def bw(out, g, needs):
        ga = gb = None
        if needs[0]:
            ga = sum_to(matmul(g, swapaxes(b, -1, -2)), a.shape)
        if needs[1]:
            if b.ndim == 2 and a.ndim > 2:
                k = a.shape[-1]
                a2 = reshape(a, (-1, k))
                g2 = reshape(g, (-1, g.shape[-1]))
                gb = matmul(swapaxes(a2, -1, -2), g2)
            else:
                gb = sum_to(matmul(swapaxes(a, -1, -2), g), b.shape)
        return ga, gb

    return _make(np.matmul(a.data, b.data), (a, b), "matmul", bw)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    data = e / e.sum(axis=axis, keepdims=True)

    def bw(out, g, needs):
        inner = tsum(mul(g, out), axis=axis, keepdims=True)
        return (mul(out, sub(g, inner)),)

    return _make(data, (a,), "softmax", bw)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    m = a.data.max(axis=axis, keepdims=True)
    z = a.data - m
    data = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def bw(out, g, needs):
        gs = tsum(g, axis=axis, keepdims=True)
        return (sub(g, mul(exp(out), gs)),)

    return _make(data, (a,), "log_softmax", bw)


def pick(a: Tensor, ids: np.ndarray) -> Tensor:
    """``out[..., i] = a[..., i, ids[..., i]]``: select one entry along the last axis."""
    ids = np.asarray(ids)
    lead = np.indices(ids.shape, sparse=True)
    idx = tuple(lead) + (ids,)
    return getitem(a, idx, unique=True)


# --------------------------------------------------------------------------
# backward


def _collect(root: Tensor) -> list[Tensor]:
    """All graph tensors reachable from ``root`` (those with a node), any order."""
    seen: dict[int, Tensor] = {}
    stack_ = [root]
    while stack_:
        t = stack_.pop()
        if id(t) in seen:
            continue
        seen[id(t)] = t
        if t.node is not None:
            for inp in t.node.inputs:
                if inp.requires_grad and id(inp) not in seen:
                    stack_.append(inp)
    return list(seen.values())


def backward(
    loss: Tensor,
    leaves: Sequence[Tensor],
    create_graph: bool = False,
    retain_graph: bool | None = None,
    grad_output: Tensor | None = None,
) -> list[Tensor]:
    """Return d(loss)/d(leaf) for each leaf.

    ``leaves`` may be true leaves or intermediate tensors. A leaf that the loss
    does not depend on gets a zero gradient rather than an error; this is the
    behaviour truncation relies on. With ``create_graph`` the returned
    gradients carry graph nodes of their own. Unless ``retain_graph`` (which
    defaults to ``create_graph``) the traversed nodes are released.
    """
    if retain_graph is None:
        retain_graph = create_graph
    if grad_output is None:
        if loss.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        grad_output = Tensor(np.ones(loss.shape, dtype=loss.dtype))
    if not np.all(np.isfinite(loss.data)):
        raise OverflowError("non-finite loss value encountered in backward")

    leaves = list(leaves)
    leaf_ids = {id(t) for t in leaves}
    out = [None] * len(leaves)
    if not loss.requires_grad:
        return [Tensor(np.zeros(t.shape, dtype=t.dtype)) for t in leaves]

    tensors = _collect(loss)
    with_node = [t for t in tensors if t.node is not None]
    with_node.sort(key=lambda t: t.node.seq)

    needed: dict[int, bool] = {}
    for t in tensors:
        if t.node is None:
            needed[id(t)] = id(t) in leaf_ids
    for t in with_node:
        # a released node has lost its inputs; treat it as needed so that
        # reaching it raises instead of silently dropping gradient
        nd = id(t) in leaf_ids or not t.node.retained
        if not nd:
            for inp in t.node.inputs:
                if needed.get(id(inp), False):
                    nd = True
                    break
        needed[id(t)] = nd

    grads: dict[int, Tensor] = {id(loss): grad_output}
    visited: list[Node] = []
    with _grad_mode(create_graph):
        for t in reversed(with_node):
            g = grads.get(id(t))
            if g is None or not needed[id(t)]:
                continue
            node = t.node
            if not node.retained:
                if id(t) in leaf_ids:
                    continue
                raise GraphReleasedError(
                    f"backward through released node {node.op}; the graph was freed by an earlier pass"
                )
            needs = tuple(inp.requires_grad and needed.get(id(inp), False) for inp in node.inputs)
            if not any(needs):
                continue
            if id(t) not in leaf_ids:
                del grads[id(t)]
            in_grads = node.backward_fn(t, g, needs)
            visited.append(node)
            for inp, gi, need in zip(node.inputs, in_grads, needs):
                if not need or gi is None:
                    continue
                prev = grads.get(id(inp))
                grads[id(inp)] = gi if prev is None else add(prev, gi)

    for i, t in enumerate(leaves):
        g = grads.get(id(t))
        if g is None:
            g = Tensor(np.zeros(t.shape, dtype=t.dtype))
        elif not np.all(np.isfinite(g.data)):
            raise OverflowError("NaN/inf gradient encountered in backward")
        out[i] = g

    if not retain_graph:
        for node in visited:
            node.release()
    return out


def detach(t: Tensor) -> Tensor:
    """Same values, no graph: gradients do not flow back through the result."""
    out = Tensor.__new__(Tensor)
    out.data = t.data
    out.requires_grad = False
    out.node = None
    return out


def leaf_proxy(t: Tensor) -> Tensor:
    """A detached copy of ``t`` that is itself a gradient-receiving leaf."""
    out = detach(t)
    out.requires_grad = True
    return out


def count_graph_nodes(t: Tensor) -> int:
    """Number of retained nodes reachable from ``t``."""
    return sum(1 for x in _collect(t) if x.node is not None and x.node.retained)


# --------------------------------------------------------------------------
# finite differences


def finite_diff_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor | np.ndarray,
    h: float = 1e-4,
    coords: Iterable[int] | None = None,
) -> float:
    """Max relative error between backward() and central differences of ``f`` at ``x``.

    ``coords`` restricts the comparison to a subset of flat indices. Raises
    :class:`NonDeterministicError` if two evaluations of ``f(x)`` disagree.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=get_default_dtype())

    # evaluations get gradient-receiving inputs so that f may itself call backward
    f1 = f(Tensor(x0.copy(), requires_grad=True)).data.copy()
    f2 = f(Tensor(x0.copy(), requires_grad=True)).data.copy()
    if not np.array_equal(f1, f2):
        raise NonDeterministicError("f returned different values for identical input")

    leaf = Tensor(x0.copy(), requires_grad=True)
    (g_ad,) = backward(f(leaf), [leaf])
    g_ad = g_ad.data.reshape(-1)

    idx = range(x0.size) if coords is None else coords
    worst = 0.0
    flat = x0.reshape(-1)
    for i in idx:
        xp = flat.copy()
        xm = flat.copy()
        xp[i] += h
        xm[i] -= h
        fp = float(f(Tensor(xp.reshape(x0.shape), requires_grad=True)).data)
        fm = float(f(Tensor(xm.reshape(x0.shape), requires_grad=True)).data)
        g_fd = (fp - fm) / (2.0 * h)
        err = abs(float(g_ad[i]) - g_fd) / (abs(g_fd) + 1e-12)
        worst = max(worst, err)
    return worst
