"""Reverse-mode automatic differentiation over dense float64 arrays.

Every operation returns a :class:`Node` that holds its value and, when any of
its inputs requires a gradient, a closure that pushes the output gradient back
to those inputs.  :func:`backward` runs the closures once each, in reverse
topological order, starting from a scalar root.

Arrays handed to :func:`accumulate` are never mutated, so one array may
safely be passed to several parents; only sums allocated by a node itself are
updated in place.  Intermediate gradients are released after use unless
``retain_intermediate=True`` is passed to :func:`backward`.

The graph is built eagerly and is confined to the thread that built it.
Inside a :func:`no_grad` block nothing is recorded, which is what inference
paths use.
"""

from __future__ import annotations

import contextlib
import math
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ConfigError, ContractError, DimensionError, DomainError

DTYPE = np.float64
LOG_2PI = math.log(2.0 * math.pi)

_state = threading.local()


def _recording() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording for the enclosed block."""
    prev = _recording()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Node:
    """A value in the computation graph.

    Attributes:
        value: the array computed in the forward pass.
        grad: accumulated gradient of the root w.r.t. ``value`` (same shape),
            or ``None`` before backward reaches this node.
        parents: input nodes this value was computed from.
        rule: name of the operation, for debugging and counting.
        requires_grad: whether gradients flow into this node.
    """

    __slots__ = ("value", "grad", "parents", "rule", "backward_fn", "requires_grad", "name", "_consumed", "_owned")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        self.value = np.asarray(value, dtype=DTYPE)
        self.grad = None
        self.parents: tuple[Node, ...] = ()
        self.rule = "leaf" if requires_grad else "const"
        self.backward_fn: Callable[[np.ndarray], None] | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._consumed = False
        self._owned = False

    @classmethod
    def from_op(cls, value, parents: Sequence["Node"], backward_fn, rule: str) -> "Node":
        """Create the output node of an operation.

        ``backward_fn(g)`` receives the gradient w.r.t. ``value`` and must call
        :func:`accumulate` on each parent that requires a gradient.  Nothing is
        recorded when no parent requires a gradient or recording is disabled.
        """
        out = cls(value)
        out.rule = rule
        if _recording() and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out.parents = tuple(parents)
            out.backward_fn = backward_fn
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def zero_grad(self) -> None:
        self.grad = None
        self._consumed = False
        self._owned = False

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Node({self.rule}{label}, shape={self.value.shape})"

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def leaf(value, name: str | None = None) -> Node:
    """A trainable input: gradients are collected for it."""
    return Node(np.array(value, dtype=DTYPE), requires_grad=True, name=name)


def constant(value) -> Node:
    return Node(value)


def as_node(x) -> Node:
    return x if isinstance(x, Node) else Node(x)


def accumulate(node: Node, g: np.ndarray) -> None:
    """Add ``g`` into ``node.grad``.

    The first contribution is stored by reference; once a sum has been
    allocated here it is owned by the node and later contributions are added
    in place.  Arrays passed in are therefore never mutated.
    """
    if not node.requires_grad:
        return
    if node.grad is None:
        node.grad = g
    elif node._owned and node.grad.shape == np.shape(g):
        node.grad += g
    else:
        node.grad = node.grad + g
        node._owned = True


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


class Gradients(dict):
    """Mapping leaf node -> gradient, plus the number of nodes visited."""

    visited: int = 0


def _topo_order(root: Node) -> list[Node]:
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Node, retain_intermediate: bool = False, seed: float = 1.0) -> Gradients:
    """Back-propagate from a scalar ``root``.

    Returns a :class:`Gradients` map holding d(seed*root)/d(leaf) for every
    reachable leaf.  Calling twice on the same root without
    :meth:`Node.zero_grad` raises, since it would double-count.
    """
    if root.value.size != 1:
        raise ContractError(f"backward needs a scalar root, got shape {root.value.shape}")
    if root._consumed:
        raise ContractError("backward already ran on this root; call zero_grad() first")
    root._consumed = True
    grads = Gradients()
    if not root.requires_grad:
        grads.visited = 0
        return grads
    order = _topo_order(root)
    for node in order:
        # leaves may be shared with earlier graphs; start every pass from zero
        node.grad = None
        node._owned = False
    root.grad = np.full(root.value.shape, seed, dtype=DTYPE)
    for node in reversed(order):
        g = node.grad
        if node.backward_fn is None:
            if g is not None:
                grads[node] = g
            continue
        if g is not None:
            node.backward_fn(g)
        if not retain_intermediate and node is not root:
            node.grad = None
            node._owned = False
    grads.visited = len(order)
    return grads


def grad_of(grads: Gradients, node: Node) -> np.ndarray:
    """Gradient for ``node``, zeros if it did not influence the root."""
    g = grads.get(node)
    return np.zeros_like(node.value) if g is None else g


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Node:
    a, b = as_node(a), as_node(b)

    def bw(g):
        accumulate(a, _unbroadcast(g, a.shape))
        accumulate(b, _unbroadcast(g, b.shape))

    return Node.from_op(a.value + b.value, (a, b), bw, "add")


def sub(a, b) -> Node:
    a, b = as_node(a), as_node(b)

    def bw(g):
        accumulate(a, _unbroadcast(g, a.shape))
        accumulate(b, _unbroadcast(-g, b.shape))

    return Node.from_op(a.value - b.value, (a, b), bw, "sub")


def mul(a, b) -> Node:
    a, b = as_node(a), as_node(b)

    def bw(g):
        if a.requires_grad:
            accumulate(a, _unbroadcast(g * b.value, a.shape))
        if b.requires_grad:
            accumulate(b, _unbroadcast(g * a.value, b.shape))

    return Node.from_op(a.value * b.value, (a, b), bw, "mul")


def div(a, b) -> Node:
    a, b = as_node(a), as_node(b)

    def bw(g):
        if a.requires_grad:
            accumulate(a, _unbroadcast(g / b.value, a.shape))
        if b.requires_grad:
            accumulate(b, _unbroadcast(-g * a.value / (b.value * b.value), b.shape))

    return Node.from_op(a.value / b.value, (a, b), bw, "div")


def neg(a) -> Node:
    a = as_node(a)
    return Node.from_op(-a.value, (a,), lambda g: accumulate(a, -g), "neg")


def scale(a, c: float) -> Node:
    a = as_node(a)
    c = float(c)
    return Node.from_op(a.value * c, (a,), lambda g: accumulate(a, g * c), "scale")


def square(a) -> Node:
    a = as_node(a)
    return Node.from_op(a.value * a.value, (a,), lambda g: accumulate(a, 2.0 * a.value * g), "square")


def log(a) -> Node:
    a = as_node(a)
    if np.any(a.value <= 0):
        raise DomainError("log of a non-positive value")
    return Node.from_op(np.log(a.value), (a,), lambda g: accumulate(a, g / a.value), "log")


def exp(a) -> Node:
    a = as_node(a)
    out = np.exp(a.value)
    return Node.from_op(out, (a,), lambda g: accumulate(a, g * out), "exp")


def clamp_min(a, lo: float) -> Node:
    """max(a, lo); the gradient is zero where the clamp is active."""
    a = as_node(a)
    mask = a.value > lo

    return Node.from_op(np.where(mask, a.value, lo), (a,), lambda g: accumulate(a, g * mask), "clamp_min")


def stop_gradient(a) -> Node:
    """Same value, but no gradient flows back into ``a``."""
    return Node(as_node(a).value)


# ---------------------------------------------------------------------------
# reductions and shape manipulation


def sum(a, axis: int | None = None) -> Node:  # noqa: A001 - mirrors numpy naming
    a = as_node(a)
    shape = a.shape

    def bw(g):
        if axis is None:
            accumulate(a, np.broadcast_to(g, shape))
        else:
            accumulate(a, np.broadcast_to(np.expand_dims(g, axis), shape))

    return Node.from_op(a.value.sum(axis=axis), (a,), bw, "sum")


def mean(a, axis: int | None = None) -> Node:
    a = as_node(a)
    n = a.value.size if axis is None else a.shape[axis]
    return scale(sum(a, axis=axis), 1.0 / n)


def reshape(a, shape) -> Node:
    a = as_node(a)
    old = a.shape
    return Node.from_op(a.value.reshape(shape), (a,), lambda g: accumulate(a, g.reshape(old)), "reshape")


def concat(nodes: Sequence, axis: int = -1) -> Node:
    nodes = [as_node(n) for n in nodes]
    sizes = [n.shape[axis] for n in nodes]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        for n, lo, hi in zip(nodes, bounds[:-1], bounds[1:]):
            if n.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                accumulate(n, g[tuple(idx)])

    return Node.from_op(np.concatenate([n.value for n in nodes], axis=axis), nodes, bw, "concat")


def stack(nodes: Sequence, axis: int = 0) -> Node:
    nodes = [as_node(n) for n in nodes]

    def bw(g):
        for i, n in enumerate(nodes):
            if n.requires_grad:
                accumulate(n, np.take(g, i, axis=axis))

    return Node.from_op(np.stack([n.value for n in nodes], axis=axis), nodes, bw, "stack")


def take(a, index) -> Node:
    """Basic indexing/slicing ``a[index]``."""
    a = as_node(a)
    shape = a.shape

    def bw(g):
        full = np.zeros(shape, dtype=DTYPE)
        np.add.at(full, index, g)
        accumulate(a, full)

    return Node.from_op(a.value[index], (a,), bw, "take")


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Node:
    """Matrix product with numpy semantics for 1-D and batched operands."""
    a, b = as_node(a), as_node(b)
    av, bv = a.value, b.value
    try:
        out = np.matmul(av, bv)
    except ValueError as exc:
        raise DimensionError(str(exc)) from None

    def bw(g):
        a2 = av[None, :] if av.ndim == 1 else av
        b2 = bv[:, None] if bv.ndim == 1 else bv
        g2 = g
        if av.ndim == 1:
            g2 = np.expand_dims(g2, -2)
        if bv.ndim == 1:
            g2 = np.expand_dims(g2, -1)
        if a.requires_grad:
            ga = np.matmul(g2, np.swapaxes(b2, -1, -2))
            if av.ndim == 1:
                ga = ga.reshape(ga.shape[:-2] + ga.shape[-1:])
            accumulate(a, _unbroadcast(ga, av.shape))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a2, -1, -2), g2)
            if bv.ndim == 1:
                gb = gb[..., 0]
            accumulate(b, _unbroadcast(gb, bv.shape))

    return Node.from_op(out, (a, b), bw, "matmul")


def affine(x, W, b) -> Node:
    """``x @ W.T + b`` for ``x`` of shape (..., n), ``W`` (m, n), ``b`` (m,)."""
    x, W, b = as_node(x), as_node(W), as_node(b)
    if W.ndim != 2 or b.shape != (W.shape[0],) or x.shape[-1:] != (W.shape[1],):
        raise DimensionError(f"affine: x{x.shape}, W{W.shape}, b{b.shape} do not conform")
    xv, Wv = x.value, W.value

    def bw(g):
        if x.requires_grad:
            accumulate(x, g @ Wv)
        if W.requires_grad:
            g2 = g.reshape(-1, g.shape[-1])
            accumulate(W, g2.T @ xv.reshape(-1, xv.shape[-1]))
        if b.requires_grad:
            accumulate(b, g.reshape(-1, g.shape[-1]).sum(axis=0))

    return Node.from_op(xv @ Wv.T + b.value, (x, W, b), bw, "affine")


def forward_affine(W, b, x) -> Node:
    """Return ``W x + b`` for a single input vector ``x``."""
    x = as_node(x)
    if x.ndim != 1:
        raise DimensionError(f"forward_affine expects a vector input, got shape {x.shape}")
    return affine(x, W, b)


def batched_matvec(M, v) -> Node:
    """Row-wise product: ``out[r] = M[r] @ v[r]`` for M (R, a, b), v (R, b)."""
    M, v = as_node(M), as_node(v)
    if M.ndim != 3 or v.ndim != 2 or M.shape[0] != v.shape[0] or M.shape[2] != v.shape[1]:
        raise DimensionError(f"batched_matvec: M{M.shape}, v{v.shape} do not conform")
    Mv, vv = M.value, v.value

    def bw(g):
        if M.requires_grad:
            accumulate(M, g[:, :, None] * vv[:, None, :])
        if v.requires_grad:
            accumulate(v, np.einsum("rab,ra->rb", Mv, g))

    return Node.from_op(np.einsum("rab,rb->ra", Mv, vv), (M, v), bw, "batched_matvec")


# ---------------------------------------------------------------------------
# activations

ACTIVATIONS = ("tanh", "relu", "sigmoid", "softplus")


def softplus_value(x: np.ndarray) -> np.ndarray:
    """log(1 + e^x) without overflow."""
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def sigmoid_value(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def activation_value(kind: str | None, x: np.ndarray) -> np.ndarray:
    if kind is None or kind == "identity":
        return x
    if kind == "tanh":
        return np.tanh(x)
    if kind == "relu":
        return np.maximum(x, 0.0)
    if kind == "sigmoid":
        return sigmoid_value(x)
    if kind == "softplus":
        return softplus_value(x)
    raise ConfigError(f"unknown activation {kind!r}; expected one of {ACTIVATIONS}")


def activation_grad(kind: str | None, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """d act / d x given the input ``x`` and output ``y``."""
    if kind is None or kind == "identity":
        return np.ones_like(x)
    if kind == "tanh":
        return 1.0 - y * y
    if kind == "relu":
        return (x > 0).astype(DTYPE)
    if kind == "sigmoid":
        return y * (1.0 - y)
    if kind == "softplus":
        return sigmoid_value(x)
    raise ConfigError(f"unknown activation {kind!r}")


def forward_activation(kind: str | None, x) -> Node:
    """Apply an elementwise activation (``None`` means identity)."""
    x = as_node(x)
    y = activation_value(kind, x.value)
    if kind is None or kind == "identity":
        return x

    def bw(g):
        accumulate(x, g * activation_grad(kind, x.value, y))

    return Node.from_op(y, (x,), bw, kind)


def tanh(x) -> Node:
    return forward_activation("tanh", x)


def relu(x) -> Node:
    return forward_activation("relu", x)


def sigmoid(x) -> Node:
    return forward_activation("sigmoid", x)


def softplus(x) -> Node:
    return forward_activation("softplus", x)


# ---------------------------------------------------------------------------
# likelihoods


def gaussian_log_density(y, mu, var) -> Node:
    """Elementwise log N(y | mu, var) = -0.5 log(2 pi var) - (y - mu)^2 / (2 var)."""
    y, mu, var = as_node(y), as_node(mu), as_node(var)
    if np.any(var.value <= 0):
        raise DomainError("gaussian_log_density requires var > 0")
    r = y.value - mu.value
    vv = var.value
    out = -0.5 * (LOG_2PI + np.log(vv)) - r * r / (2.0 * vv)

    def bw(g):
        if y.requires_grad:
            accumulate(y, _unbroadcast(-g * r / vv, y.shape))
        if mu.requires_grad:
            accumulate(mu, _unbroadcast(g * r / vv, mu.shape))
        if var.requires_grad:
            accumulate(var, _unbroadcast(g * (-0.5 / vv + r * r / (2.0 * vv * vv)), var.shape))

    return Node.from_op(out, (y, mu, var), bw, "gaussian_log_density")


def binary_cross_entropy(p, target, eps: float = 1e-12) -> Node:
    """Elementwise -[a log p + (1-a) log(1-p)] with p clipped to [eps, 1-eps]."""
    p, target = as_node(p), as_node(target)
    pv = np.clip(p.value, eps, 1.0 - eps)
    a = target.value
    out = -(a * np.log(pv) + (1.0 - a) * np.log1p(-pv))
    inside = (p.value > eps) & (p.value < 1.0 - eps)

    def bw(g):
        accumulate(p, _unbroadcast(g * (-(a / pv) + (1.0 - a) / (1.0 - pv)) * inside, p.shape))

    return Node.from_op(out, (p, target), bw, "bce")


# ---------------------------------------------------------------------------
# checking utilities


def numeric_gradient(fn: Callable[[], float], array: np.ndarray, step: float = 1e-5,
                     indices: Iterable | None = None) -> np.ndarray:
    """Central finite differences of ``fn`` w.r.t. entries of ``array`` (mutated in place, restored)."""
    flat = array.reshape(-1)
    out = np.zeros_like(flat)
    idx = range(flat.size) if indices is None else indices
    for i in idx:
        orig = flat[i]
        flat[i] = orig + step
        fp = fn()
        flat[i] = orig - step
        fm = fn()
        flat[i] = orig
        out[i] = (fp - fm) / (2.0 * step)
    return out.reshape(array.shape)


def relative_error(a, b, floor: float = 1e-8) -> float:
    a, b = np.asarray(a, dtype=DTYPE), np.asarray(b, dtype=DTYPE)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))
