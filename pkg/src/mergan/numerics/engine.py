"""Define-by-run computation graph with re-differentiable reverse-mode autodiff.

Every operation appends a node to its graph and evaluates eagerly (numpy
float64), so insertion order is a topological order. `backward` walks the
recorded nodes in reverse and emits each adjoint as *new graph nodes* composed
from the same primitive set; gradients are therefore themselves differentiable,
which is what lets a gradient-norm penalty be trained by a second backward pass
through the first one.

The primitive set is closed under adjoint composition. A few helpers exist
purely so the listed ops' derivatives stay inside the set: `divide` (sqrt and
softmax adjoints need a reciprocal), `slice_` (concat's adjoint), `softmax`
(cross-entropy's adjoint), and the zero-derivative activation gates (leaky-relu
and relu are piecewise linear, so their derivatives are piecewise constants
with zero derivative almost everywhere; at exactly 0 the right-derivative is
used). Network code should stick to the public ops.

Values are never mutated once a node is created; parameter updates happen on
the caller's numpy arrays between graphs, never through a live graph.
"""

from __future__ import annotations

import numpy as np

from ..errors import GraphError, NumericsError, ShapeError


class Tensor:
    """A node in a Graph: an op tag, input nodes, and the cached f64 value."""

    __slots__ = ("graph", "idx", "op", "inputs", "value", "attrs")

    def __init__(self, graph, idx, op, inputs, value, attrs):
        self.graph = graph
        self.idx = idx
        self.op = op
        self.inputs = inputs
        self.value = value
        self.attrs = attrs

    @property
    def shape(self) -> tuple:
        return self.value.shape

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __repr__(self):
        return f"Tensor(op={self.op!r}, shape={self.value.shape}, idx={self.idx})"


class Graph:
    """Append-only record of operations; insertion order is topological order."""

    __slots__ = ("nodes", "debug", "_one")

    def __init__(self, debug: bool = False):
        self.nodes: list[Tensor] = []
        self.debug = debug
        self._one = None

    def tensor(self, values) -> Tensor:
        """Create a leaf node. Leaves have no inputs and stop backpropagation."""
        v = np.asarray(values, dtype=np.float64)
        return _node(self, "leaf", (), v)

    # constants and inputs are both leaves; the distinction is only whether the
    # caller later asks backward() for their gradient
    constant = tensor

    def one(self) -> Tensor:
        if self._one is None:
            self._one = self.tensor(1.0)
        return self._one

    def __len__(self):
        return len(self.nodes)


def _node(g: Graph, op: str, inputs: tuple, value: np.ndarray, attrs=None) -> Tensor:
    if g.debug and not np.isfinite(value).all():
        raise NumericsError(f"{op}: non-finite value produced")
    t = Tensor(g, len(g.nodes), op, inputs, value, attrs)
    g.nodes.append(t)
    return t


def _same_graph(*tensors: Tensor) -> Graph:
    g = tensors[0].graph
    for t in tensors[1:]:
        if t.graph is not g:
            raise GraphError("operands belong to different graphs")
    return g


# ---------------------------------------------------------------------------
# primitive ops


def add(a: Tensor, b: Tensor) -> Tensor:
    g = _same_graph(a, b)
    try:
        v = a.value + b.value
    except ValueError:
        raise ShapeError("add", a.shape, b.shape) from None
    return _node(g, "add", (a, b), v)


def sub(a: Tensor, b: Tensor) -> Tensor:
    g = _same_graph(a, b)
    try:
        v = a.value - b.value
    except ValueError:
        raise ShapeError("sub", a.shape, b.shape) from None
    return _node(g, "sub", (a, b), v)


def mul(a: Tensor, b: Tensor) -> Tensor:
    g = _same_graph(a, b)
    try:
        v = a.value * b.value
    except ValueError:
        raise ShapeError("mul", a.shape, b.shape) from None
    return _node(g, "mul", (a, b), v)


def divide(a: Tensor, b: Tensor) -> Tensor:
    g = _same_graph(a, b)
    try:
        v = a.value / b.value
    except ValueError:
        raise ShapeError("divide", a.shape, b.shape) from None
    return _node(g, "divide", (a, b), v)


def scale(a: Tensor, k: float) -> Tensor:
    return _node(a.graph, "scale", (a,), a.value * k, {"k": float(k)})


def matmul(a: Tensor, b: Tensor, ta: bool = False, tb: bool = False) -> Tensor:
    g = _same_graph(a, b)
    av = a.value.T if ta else a.value
    bv = b.value.T if tb else b.value
    if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape, detail=f"ta={ta} tb={tb}")
    return _node(g, "matmul", (a, b), av @ bv, {"ta": ta, "tb": tb})


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    # max(x, slope*x) == x for x >= 0, slope*x otherwise (slope < 1)
    v = slope * x.value
    np.maximum(x.value, v, out=v)
    return _node(x.graph, "leaky_relu", (x,), v, {"slope": slope})


def relu(x: Tensor) -> Tensor:
    return _node(x.graph, "relu", (x,), np.maximum(x.value, 0.0))


def _lrelu_gate(x: Tensor, slope: float) -> Tensor:
    # derivative pattern of leaky_relu; piecewise constant, zero adjoint
    v = np.where(x.value >= 0.0, 1.0, slope)
    return _node(x.graph, "lrelu_gate", (x,), v, {"slope": slope})


def _relu_gate(x: Tensor) -> Tensor:
    v = np.where(x.value >= 0.0, 1.0, 0.0)
    return _node(x.graph, "relu_gate", (x,), v)


def tanh(x: Tensor) -> Tensor:
    return _node(x.graph, "tanh", (x,), np.tanh(x.value))


def square(x: Tensor) -> Tensor:
    return _node(x.graph, "square", (x,), x.value * x.value)


def sqrt(x: Tensor) -> Tensor:
    # pre: x >= 0; negative inputs yield NaN, caught in debug mode
    return _node(x.graph, "sqrt", (x,), np.sqrt(x.value))


def reshape(x: Tensor, shape) -> Tensor:
    try:
        v = x.value.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", x.shape, shape, detail="element count mismatch") from None
    return _node(x.graph, "reshape", (x,), v)


def concat(xs, axis: int = 0) -> Tensor:
    if not xs:
        raise ShapeError("concat", (), detail="no operands")
    g = _same_graph(*xs)
    try:
        v = np.concatenate([t.value for t in xs], axis=axis)
    except ValueError:
        raise ShapeError("concat", *[t.shape for t in xs]) from None
    return _node(g, "concat", tuple(xs), v, {"axis": axis})


def slice_(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    size = x.value.shape[axis]
    if not (0 <= start <= stop <= size):
        raise ShapeError("slice", x.shape, detail=f"range [{start}, {stop}) on axis {axis}")
    idx = (slice(None),) * axis + (slice(start, stop),)
    return _node(x.graph, "slice", (x,), x.value[idx], {"axis": axis, "start": start, "stop": stop})


def reduce_sum(x: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    v = x.value.sum(axis=axis, keepdims=keepdims)
    return _node(x.graph, "reduce_sum", (x,), v, {"axis": axis, "keepdims": keepdims})


def reduce_mean(x: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    v = x.value.mean(axis=axis, keepdims=keepdims)
    return _node(x.graph, "reduce_mean", (x,), v, {"axis": axis, "keepdims": keepdims})


def softmax(x: Tensor) -> Tensor:
    """Row-wise softmax of a 2-D tensor."""
    if x.value.ndim != 2:
        raise ShapeError("softmax", x.shape, detail="expects a 2-D tensor")
    z = x.value - x.value.max(axis=1, keepdims=True)
    ez = np.exp(z)
    return _node(x.graph, "softmax", (x,), ez / ez.sum(axis=1, keepdims=True))


def softmax_cross_entropy(logits: Tensor, targets: Tensor) -> Tensor:
    """Mean cross-entropy between row-wise softmax(logits) and one-hot targets.

    `targets` rows must sum to 1 and must be constants; gradients w.r.t.
    targets are not defined.
    """
    g = _same_graph(logits, targets)
    lv, tv = logits.value, targets.value
    if lv.ndim != 2 or lv.shape != tv.shape:
        raise ShapeError("softmax_cross_entropy", logits.shape, targets.shape)
    m = lv.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(lv - m).sum(axis=1))
    ce = lse - (lv * tv).sum(axis=1)
    return _node(g, "softmax_cross_entropy", (logits, targets), np.asarray(ce.mean()))


def detach(x: Tensor) -> Tensor:
    """A leaf with x's value: blocks gradient flow through x."""
    return _node(x.graph, "leaf", (), x.value)


# ---------------------------------------------------------------------------
# composite helpers (built from primitives, hence re-differentiable)


def batch_moments(x: Tensor) -> tuple[Tensor, Tensor]:
    """Mean and population variance over axis 0 of a 2-D tensor."""
    mean = reduce_mean(x, axis=0)
    var = reduce_mean(square(sub(x, mean)), axis=0)
    return mean, var


def l2norm_rows(x: Tensor) -> Tensor:
    """Per-row Euclidean norm of a 2-D tensor; shape (B,)."""
    if x.value.ndim != 2:
        raise ShapeError("l2norm_rows", x.shape, detail="expects a 2-D tensor")
    return sqrt(reduce_sum(square(x), axis=1))


# ---------------------------------------------------------------------------
# adjoint rules
#
# Each builder receives (node, upstream adjoint, need) where need[i] says
# whether input i requires a contribution, and returns one Tensor or None per
# input. Builders create nodes through the public ops above, so adjoints are
# themselves differentiable. Ops absent from the registry (leaves, gates) have
# zero derivative.


def _unbroadcast(gt: Tensor, shape: tuple) -> Tensor:
    nd = len(shape)
    while gt.value.ndim > nd:
        gt = reduce_sum(gt, axis=0)
    for ax in range(nd):
        if shape[ax] == 1 and gt.value.shape[ax] != 1:
            gt = reduce_sum(gt, axis=ax, keepdims=True)
    return gt


def _adj_add(node, g, need):
    a, b = node.inputs
    return (
        _unbroadcast(g, a.shape) if need[0] else None,
        _unbroadcast(g, b.shape) if need[1] else None,
    )


def _adj_sub(node, g, need):
    a, b = node.inputs
    return (
        _unbroadcast(g, a.shape) if need[0] else None,
        _unbroadcast(scale(g, -1.0), b.shape) if need[1] else None,
    )


def _adj_mul(node, g, need):
    a, b = node.inputs
    return (
        _unbroadcast(mul(g, b), a.shape) if need[0] else None,
        _unbroadcast(mul(g, a), b.shape) if need[1] else None,
    )


def _adj_divide(node, g, need):
    a, b = node.inputs
    da = _unbroadcast(divide(g, b), a.shape) if need[0] else None
    db = None
    if need[1]:
        db = _unbroadcast(scale(divide(mul(g, a), square(b)), -1.0), b.shape)
    return (da, db)


def _adj_scale(node, g, need):
    return (scale(g, node.attrs["k"]),)


def _adj_matmul(node, g, need):
    a, b = node.inputs
    ta, tb = node.attrs["ta"], node.attrs["tb"]
    da = db = None
    if need[0]:
        da = matmul(b, g, ta=tb, tb=True) if ta else matmul(g, b, tb=not tb)
    if need[1]:
        db = matmul(g, a, ta=True, tb=ta) if tb else matmul(a, g, ta=not ta)
    return (da, db)


def _adj_leaky_relu(node, g, need):
    (x,) = node.inputs
    return (mul(g, _lrelu_gate(x, node.attrs["slope"])),)


def _adj_relu(node, g, need):
    (x,) = node.inputs
    return (mul(g, _relu_gate(x)),)


def _adj_tanh(node, g, need):
    return (mul(g, sub(node.graph.one(), square(node))),)


def _adj_square(node, g, need):
    (x,) = node.inputs
    return (mul(g, scale(x, 2.0)),)


def _adj_sqrt(node, g, need):
    return (divide(g, scale(node, 2.0)),)


def _adj_reshape(node, g, need):
    (x,) = node.inputs
    return (reshape(g, x.shape),)


def _adj_concat(node, g, need):
    axis = node.attrs["axis"]
    out, off = [], 0
    for inp, needed in zip(node.inputs, need):
        size = inp.value.shape[axis]
        out.append(slice_(g, axis, off, off + size) if needed else None)
        off += size
    return tuple(out)


def _adj_slice(node, g, need):
    (x,) = node.inputs
    axis, start, stop = node.attrs["axis"], node.attrs["start"], node.attrs["stop"]
    size = x.value.shape[axis]
    pieces = []
    if start > 0:
        shp = list(x.shape)
        shp[axis] = start
        pieces.append(node.graph.tensor(np.zeros(shp)))
    pieces.append(g)
    if stop < size:
        shp = list(x.shape)
        shp[axis] = size - stop
        pieces.append(node.graph.tensor(np.zeros(shp)))
    return (pieces[0] if len(pieces) == 1 else concat(pieces, axis=axis),)


def _spread(node, g, fill: float):
    # shared by reduce_sum/reduce_mean adjoints: broadcast g over the reduced
    # axis by multiplying a constant filled with `fill`
    (x,) = node.inputs
    axis, keepdims = node.attrs["axis"], node.attrs["keepdims"]
    if axis is not None and not keepdims:
        shp = list(x.shape)
        shp[axis] = 1
        g = reshape(g, shp)
    return mul(node.graph.tensor(np.full(x.shape, fill)), g)


def _adj_reduce_sum(node, g, need):
    return (_spread(node, g, 1.0),)


def _adj_reduce_mean(node, g, need):
    (x,) = node.inputs
    axis = node.attrs["axis"]
    n = x.value.size if axis is None else x.value.shape[axis]
    return (_spread(node, g, 1.0 / n),)


def _adj_softmax(node, g, need):
    s = reduce_sum(mul(node, g), axis=1, keepdims=True)
    return (mul(node, sub(g, s)),)


def _adj_softmax_ce(node, g, need):
    logits, targets = node.inputs
    if need[1]:
        raise GraphError("softmax_cross_entropy: targets must be constants")
    d = sub(softmax(logits), targets)
    return (scale(mul(d, g), 1.0 / logits.value.shape[0]), None)


ADJOINTS = {
    "add": _adj_add,
    "sub": _adj_sub,
    "mul": _adj_mul,
    "divide": _adj_divide,
    "scale": _adj_scale,
    "matmul": _adj_matmul,
    "leaky_relu": _adj_leaky_relu,
    "relu": _adj_relu,
    "tanh": _adj_tanh,
    "square": _adj_square,
    "sqrt": _adj_sqrt,
    "reshape": _adj_reshape,
    "concat": _adj_concat,
    "slice": _adj_slice,
    "reduce_sum": _adj_reduce_sum,
    "reduce_mean": _adj_reduce_mean,
    "softmax": _adj_softmax,
    "softmax_cross_entropy": _adj_softmax_ce,
}


def backward(loss: Tensor, wrt: list[Tensor]) -> list[Tensor]:
    """Gradients of a scalar loss w.r.t. each tensor in wrt, as graph nodes.

    Adjoints are appended to the loss's graph, so the returned tensors can be
    differentiated again. Tensors the loss does not depend on get zero
    gradients.
    """
    g = loss.graph
    for w in wrt:
        if w.graph is not g:
            raise GraphError("backward: a requested tensor belongs to a different graph")
    if loss.value.shape != ():
        raise ShapeError("backward", loss.shape, detail="loss must be a scalar")

    nodes = g.nodes
    limit = loss.idx
    active = bytearray(limit + 1)
    min_idx = limit
    for w in wrt:
        if w.idx <= limit:
            active[w.idx] = 1
            if w.idx < min_idx:
                min_idx = w.idx
    for i in range(min_idx, limit + 1):
        if active[i]:
            continue
        for inp in nodes[i].inputs:
            if active[inp.idx]:
                active[i] = 1
                break

    adjoint: dict[int, Tensor] = {}
    if active[limit]:
        adjoint[limit] = g.one()
    for i in range(limit, min_idx - 1, -1):
        gi = adjoint.get(i)
        if gi is None:
            continue
        node = nodes[i]
        if not node.inputs:
            continue
        builder = ADJOINTS.get(node.op)
        if builder is None:
            continue  # zero-derivative op (activation gates)
        need = [bool(active[inp.idx]) for inp in node.inputs]
        if not any(need):
            continue
        for inp, contrib in zip(node.inputs, builder(node, gi, need)):
            if contrib is None:
                continue
            prev = adjoint.get(inp.idx)
            adjoint[inp.idx] = contrib if prev is None else add(prev, contrib)

    out = []
    for w in wrt:
        t = adjoint.get(w.idx)
        out.append(t if t is not None else g.tensor(np.zeros_like(w.value)))
    return out
