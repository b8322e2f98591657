"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

Every operation builds a node in an implicit acyclic graph (parents plus a
vector-Jacobian closure). A graph lives for one forward pass and is released
after ``backward``; leaf gradients accumulate across backward calls until
explicitly zeroed.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor",
    "Graph",
    "no_grad",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "exp",
    "log",
    "sqrt",
    "tanh",
    "matmul",
    "dot",
    "swap_last_axes",
    "reshape",
    "tensor_sum",
    "tensor_mean",
    "sorted_sum",
    "sorted_mean",
    "concat",
    "embedding_lookup",
    "masked_fill",
    "log_softmax",
    "softmax",
    "cosine_similarity",
    "cosine_matrix",
    "backward",
]

_grad_enabled = True


class no_grad:
    """Disable graph construction inside the block (evaluation mode)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, exc_type, exc, tb):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "parents", "vjp", "op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.parents: tuple = ()
        self.vjp = None
        self.op = "leaf"

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self):
        backward(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, op={self.op!r}{flag})"

    # operator sugar; constants are wrapped as non-grad leaves
    def __add__(self, other):
        return add(self, _wrap(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, _wrap(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _wrap(other))

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tensor_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents, vjp, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out.vjp = vjp
    else:
        out.requires_grad = False
        out.parents = ()
        out.vjp = None
    out.op = op
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to the original operand shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_check(a: Tensor, b: Tensor, op: str) -> tuple:
    try:
        return np.broadcast_shapes(a.data.shape, b.data.shape)
    except ValueError:
        raise ValueError(
            f"{op}: shapes {a.data.shape} and {b.data.shape} do not conform"
        ) from None


# --- elementwise and linear ops -------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _broadcast_check(a, b, "add")
    out = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _node(out, (a, b), vjp, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _broadcast_check(a, b, "sub")
    out = a.data - b.data

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _node(out, (a, b), vjp, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _broadcast_check(a, b, "mul")
    out = a.data * b.data

    def vjp(g):
        return (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        )

    return _node(out, (a, b), vjp, "mul")


def div(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _broadcast_check(a, b, "div")
    if np.any(b.data == 0.0):
        raise ValueError("div: division by zero")
    out = a.data / b.data

    def vjp(g):
        return (
            _unbroadcast(g / b.data, a.data.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape),
        )

    return _node(out, (a, b), vjp, "div")


def neg(a: Tensor) -> Tensor:
    a = _wrap(a)
    return _node(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a: Tensor) -> Tensor:
    a = _wrap(a)
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    a = _wrap(a)
    if np.any(a.data <= 0.0):
        raise ValueError(f"log: non-positive input (min={np.min(a.data)!r})")
    out = np.log(a.data)
    return _node(out, (a,), lambda g: (g / a.data,), "log")


def sqrt(a: Tensor) -> Tensor:
    a = _wrap(a)
    if np.any(a.data < 0.0):
        raise ValueError(f"sqrt: negative input (min={np.min(a.data)!r})")
    out = np.sqrt(a.data)
    return _node(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def tanh(a: Tensor) -> Tensor:
    a = _wrap(a)
    out = np.tanh(a.data)
    return _node(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; operands of rank >= 2, stacked dims broadcast."""
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ValueError(
            f"matmul: operands must have rank >= 2, got {a.data.shape} @ {b.data.shape}"
        )
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ValueError(
            f"matmul: inner dimensions do not conform: {a.data.shape} @ {b.data.shape}"
        )
    out = np.matmul(a.data, b.data)

    def vjp(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.data.shape)
        if b.data.ndim == 2 and a.data.ndim > 2:
            # stacked @ weight: collapse the stack into one GEMM
            k = a.data.shape[-1]
            m = g.shape[-1]
            gb = a.data.reshape(-1, k).T @ g.reshape(-1, m)
        else:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.data.shape)
        return ga, gb

    return _node(out, (a, b), vjp, "matmul")


def dot(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim != 1 or b.data.ndim != 1 or a.data.shape != b.data.shape:
        raise ValueError(f"dot: need equal-length vectors, got {a.data.shape}, {b.data.shape}")
    out = np.asarray(a.data @ b.data)

    def vjp(g):
        return g * b.data, g * a.data

    return _node(out, (a, b), vjp, "dot")


def swap_last_axes(a: Tensor) -> Tensor:
    a = _wrap(a)
    if a.data.ndim < 2:
        raise ValueError(f"swap_last_axes: rank >= 2 required, got {a.data.shape}")
    out = np.swapaxes(a.data, -1, -2)
    return _node(out, (a,), lambda g: (np.swapaxes(g, -1, -2),), "swapT")


def reshape(a: Tensor, shape) -> Tensor:
    a = _wrap(a)
    out = a.data.reshape(shape)
    return _node(out, (a,), lambda g: (g.reshape(a.data.shape),), "reshape")


def _restore_axes(g, src_shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g, src_shape)
    if not keepdims:
        axes = axis if isinstance(axis, tuple) else (axis,)
        for ax in sorted(ax % len(src_shape) for ax in axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, src_shape)


def tensor_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def vjp(g):
        return (_restore_axes(g, a.data.shape, axis, keepdims).copy(),)

    return _node(np.asarray(out), (a,), vjp, "sum")


def tensor_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    out = np.mean(a.data, axis=axis, keepdims=keepdims)
    n = a.data.size if axis is None else np.prod(
        [a.data.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))]
    )

    def vjp(g):
        return (_restore_axes(g, a.data.shape, axis, keepdims) / n,)

    return _node(np.asarray(out), (a,), vjp, "mean")


def sorted_sum(a: Tensor, axis=None) -> Tensor:
    """Sum with addends sorted ascending first.

    Forward value is independent of element order, giving bit-level
    permutation invariance for reductions over batch items. The gradient is
    identical to plain sum.
    """
    a = _wrap(a)
    out = np.sum(np.sort(a.data, axis=axis if axis is not None else None), axis=axis)

    def vjp(g):
        return (_restore_axes(g, a.data.shape, axis, False).copy(),)

    return _node(np.asarray(out), (a,), vjp, "sorted_sum")


def sorted_mean(a: Tensor, axis=None) -> Tensor:
    a = _wrap(a)
    n = a.data.size if axis is None else a.data.shape[axis]
    return sorted_sum(a, axis=axis) * (1.0 / n)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    if not tensors:
        raise ValueError("concat: empty input list")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ValueError(
            f"concat: shapes do not conform: {[t.data.shape for t in tensors]}"
        ) from None
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, offsets, axis=axis))

    return _node(out, tuple(tensors), vjp, "concat")


def embedding_lookup(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup ``table[ids]``; gradient scatters rows back with add-at."""
    table = _wrap(table)
    ids = np.asarray(ids)
    if table.data.ndim != 2:
        raise ValueError(f"embedding_lookup: table must be 2-d, got {table.data.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise ValueError(
            f"embedding_lookup: ids outside [0, {table.data.shape[0]}): "
            f"min={ids.min()}, max={ids.max()}"
        )
    out = table.data[ids]

    def vjp(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.data.shape[1]))
        return (gt,)

    return _node(out, (table,), vjp, "embedding_lookup")


def masked_fill(a: Tensor, mask: np.ndarray, value: float) -> Tensor:
    """Replace entries where mask is true by a constant; no gradient there."""
    a = _wrap(a)
    mask = np.asarray(mask, dtype=bool)
    if np.broadcast_shapes(a.data.shape, mask.shape) != a.data.shape:
        raise ValueError(
            f"masked_fill: mask {mask.shape} does not broadcast onto {a.data.shape}"
        )
    out = np.where(mask, value, a.data)

    def vjp(g):
        return (np.where(mask, 0.0, g),)

    return _node(out, (a,), vjp, "masked_fill")


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable log-softmax via max subtraction.

    The inner exponential sum is taken in ascending-value order, so the
    result is bit-identical under any permutation along ``axis``.
    """
    a = _wrap(a)
    if a.data.shape == () or a.data.shape[axis] == 0:
        raise ValueError(f"log_softmax: empty or scalar axis {axis} of shape {a.data.shape}")
    m = np.max(a.data, axis=axis, keepdims=True)
    ex = np.exp(a.data - m)
    denom = np.sum(np.sort(ex, axis=axis), axis=axis, keepdims=True)
    out = a.data - (m + np.log(denom))

    def vjp(g):
        soft = np.exp(out)
        return (g - soft * np.sum(g, axis=axis, keepdims=True),)

    return _node(out, (a,), vjp, "log_softmax")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    return exp(log_softmax(a, axis=axis))


def cosine_similarity(a: Tensor, b: Tensor) -> Tensor:
    """Cosine of the angle between two nonzero vectors; value in [-1, 1]."""
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim != 1 or b.data.ndim != 1 or a.data.shape != b.data.shape:
        raise ValueError(
            f"cosine_similarity: need equal-length vectors, got {a.data.shape}, {b.data.shape}"
        )
    if not np.any(a.data) or not np.any(b.data):
        raise ValueError("cosine_similarity: zero-norm vector (degenerate embedding)")
    return div(dot(a, b), mul(sqrt(dot(a, a)), sqrt(dot(b, b))))


def cosine_matrix(a: Tensor, b: Tensor) -> Tensor:
    """Pairwise cosine similarities between rows of two (n, d)/(m, d) matrices."""
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[1]:
        raise ValueError(f"cosine_matrix: incompatible shapes {a.data.shape}, {b.data.shape}")
    for name, t in (("a", a), ("b", b)):
        if np.any(np.all(t.data == 0.0, axis=1)):
            raise ValueError(f"cosine_matrix: zero-norm row in {name} (degenerate embedding)")
    an = div(a, sqrt(tensor_sum(mul(a, a), axis=1, keepdims=True)))
    bn = div(b, sqrt(tensor_sum(mul(b, b), axis=1, keepdims=True)))
    return matmul(an, swap_last_axes(bn))


# --- backward pass ---------------------------------------------------------


class Graph:
    """Topologically ordered view of the computation reachable from a root."""

    __slots__ = ("nodes", "leaves")

    def __init__(self, nodes, leaves):
        self.nodes = nodes
        self.leaves = leaves

    @staticmethod
    def from_root(root: Tensor) -> "Graph":
        nodes: list[Tensor] = []
        leaves: list[Tensor] = []
        seen = set()
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                nodes.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            if node.parents:
                stack.append((node, True))
                # reversed keeps child visitation in construction order
                for p in reversed(node.parents):
                    if id(p) not in seen:
                        stack.append((p, False))
            else:
                nodes.append(node)
                if node.requires_grad:
                    leaves.append(node)
        return Graph(nodes, leaves)


def backward(loss: Tensor):
    """Accumulate d(loss)/d(node) into ``.grad`` over the reachable graph.

    Gradients add onto any existing ``.grad``; call ``zero_grad`` between
    optimization steps. Only the scalar root is accepted.
    """
    if loss.data.shape != ():
        raise ValueError(f"backward: root must be scalar, got shape {loss.data.shape}")
    if not loss.requires_grad:
        raise ValueError("backward: root does not require grad")
    graph = Graph.from_root(loss)
    flowing = {id(loss): np.ones((), dtype=np.float64)}
    for node in reversed(graph.nodes):
        g = flowing.pop(id(node), None)
        if g is None or not node.requires_grad:
            continue
        if node.grad is None:
            node.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            node.grad = node.grad + g
        if node.vjp is None:
            continue
        for parent, pg in zip(node.parents, node.vjp(g)):
            if not parent.requires_grad or pg is None:
                continue
            prev = flowing.get(id(parent))
            flowing[id(parent)] = pg if prev is None else prev + pg
