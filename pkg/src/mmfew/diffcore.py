"""Reverse-mode automatic differentiation over dense float64 tensors.

The engine records every operation on an append-only tape (`Graph`). A
backward pass walks the tape in exact reverse append order, so gradients
are bit-reproducible for identical graphs. Backward rules are themselves
written in terms of the recorded ops: with `GradMode.SECOND_ORDER` the
adjoint computation is recorded too, which makes gradients-of-gradients
(meta-gradients through unrolled gradient-descent steps) available from
the same machinery. `GradMode.FIRST_ORDER` runs the adjoint computation
with recording paused, returning constants.

There is no global mutable state: everything lives on the Graph instance,
so independent graphs can run on independent threads.
"""

from __future__ import annotations

import heapq
from contextlib import contextmanager
from enum import Enum

import numpy as np

__all__ = [
    "DiffError",
    "ShapeMismatch",
    "NonScalarLoss",
    "InvalidProbability",
    "LabelOutOfRange",
    "GradMode",
    "Mode",
    "Graph",
    "Tensor",
    "add",
    "sub",
    "mul",
    "neg",
    "scale",
    "matmul",
    "transpose",
    "reshape",
    "reduce_sum",
    "reduce_mean",
    "broadcast_to",
    "narrow",
    "pad_axis",
    "concat",
    "exp",
    "log",
    "reciprocal",
    "sigmoid",
    "relu",
    "dropout",
    "softmax_cross_entropy",
    "grad",
]


class DiffError(Exception):
    """Base class for errors raised by the autodiff engine."""


class ShapeMismatch(DiffError):
    pass


class NonScalarLoss(DiffError):
    pass


class InvalidProbability(DiffError):
    pass


class LabelOutOfRange(DiffError):
    pass


class GradMode(Enum):
    """Whether gradient computation is itself differentiable.

    SECOND_ORDER records the adjoint arithmetic on the tape, so the
    returned gradients can be differentiated again. FIRST_ORDER returns
    detached constants (cheaper; gradients of gradients are zero).
    """

    FIRST_ORDER = "first"
    SECOND_ORDER = "second"


class Mode(Enum):
    TRAIN = "train"
    EVAL = "eval"


class Tensor:
    """A node handle on a Graph, wrapping a float64 ndarray.

    Detached tensors (created while recording is paused) carry nid == -1
    and never participate in backward passes.
    """

    __slots__ = ("graph", "nid", "value", "op", "inputs", "_vjp")

    def __init__(self, graph, value, op, inputs, vjp):
        self.graph = graph
        self.value = value
        self.op = op
        self.inputs = inputs
        self._vjp = vjp
        self.nid = graph._register(self)

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Tensor(op={self.op!r}, nid={self.nid}, shape={self.value.shape})"

    # -- operator sugar -------------------------------------------------
    def _lift(self, other):
        if isinstance(other, Tensor):
            return other
        return self.graph.constant(other)

    def __add__(self, other):
        return add(self, self._lift(other))

    def __radd__(self, other):
        return add(self._lift(other), self)

    def __sub__(self, other):
        return sub(self, self._lift(other))

    def __rsub__(self, other):
        return sub(self._lift(other), self)

    def __mul__(self, other):
        return mul(self, self._lift(other))

    def __rmul__(self, other):
        return mul(self._lift(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape):
        return reshape(self, shape)


class Graph:
    """Append-only tape of operation records.

    Node inputs always precede the node itself in `nodes`; the backward
    pass in `grad` visits nodes in exact reverse append order.
    """

    __slots__ = ("nodes", "recording")

    def __init__(self):
        self.nodes: list[Tensor] = []
        self.recording = True

    def _register(self, t: Tensor) -> int:
        if not self.recording:
            return -1
        self.nodes.append(t)
        return len(self.nodes) - 1

    def leaf(self, value) -> Tensor:
        """Record a differentiable input (parameter or data) tensor."""
        v = np.asarray(value, dtype=np.float64)
        return Tensor(self, v, "leaf", (), None)

    def constant(self, value) -> Tensor:
        """Record a non-differentiable value (masks, targets, scalars)."""
        v = np.asarray(value, dtype=np.float64)
        return Tensor(self, v, "const", (), None)

    @contextmanager
    def paused(self):
        """Temporarily stop recording; created tensors are detached."""
        prev = self.recording
        self.recording = False
        try:
            yield self
        finally:
            self.recording = prev

    def release(self) -> None:
        """Drop the tape and break closure cycles so node memory is
        reclaimed by reference counting as soon as callers let go.
        Values already extracted from tensors stay valid."""
        for t in self.nodes:
            t._vjp = None
        self.nodes.clear()


def _graph_of(*tensors: Tensor) -> Graph:
    g = tensors[0].graph
    for t in tensors[1:]:
        if t.graph is not g:
            raise ValueError("tensors belong to different graphs")
    return g


def _op(g: Graph, value, op, inputs, vjp) -> Tensor:
    if not g.recording:
        return Tensor(g, value, op, (), None)
    return Tensor(g, value, op, inputs, vjp)


def _sum_to(t: Tensor, shape: tuple) -> Tensor:
    """Reduce a broadcast result back to `shape` by summing extra axes."""
    cur = t
    while cur.value.ndim > len(shape):
        cur = reduce_sum(cur, axis=0)
    for i, (have, want) in enumerate(zip(cur.value.shape, shape)):
        if want == 1 and have != 1:
            cur = reduce_sum(cur, axis=i, keepdims=True)
    if cur.value.shape != tuple(shape):
        raise ShapeMismatch(f"cannot reduce {t.value.shape} to {shape}")
    return cur


# -- elementwise arithmetic ----------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    g = _graph_of(a, b)
    try:
        v = a.value + b.value
    except ValueError as e:
        raise ShapeMismatch(str(e)) from None
    ash, bsh = a.value.shape, b.value.shape

    def vjp(gout):
        return _sum_to(gout, ash), _sum_to(gout, bsh)

    return _op(g, v, "add", (a, b), vjp)


def sub(a: Tensor, b: Tensor) -> Tensor:
    g = _graph_of(a, b)
    try:
        v = a.value - b.value
    except ValueError as e:
        raise ShapeMismatch(str(e)) from None
    ash, bsh = a.value.shape, b.value.shape

    def vjp(gout):
        return _sum_to(gout, ash), _sum_to(neg(gout), bsh)

    return _op(g, v, "sub", (a, b), vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    g = _graph_of(a, b)
    try:
        v = a.value * b.value
    except ValueError as e:
        raise ShapeMismatch(str(e)) from None
    ash, bsh = a.value.shape, b.value.shape

    def vjp(gout):
        return _sum_to(mul(gout, b), ash), _sum_to(mul(gout, a), bsh)

    return _op(g, v, "mul", (a, b), vjp)


def neg(a: Tensor) -> Tensor:
    def vjp(gout):
        return (neg(gout),)

    return _op(a.graph, -a.value, "neg", (a,), vjp)


def scale(a: Tensor, s: float) -> Tensor:
    """Multiply by a python-float constant (cheaper than a mul node)."""
    s = float(s)

    def vjp(gout):
        return (scale(gout, s),)

    return _op(a.graph, a.value * s, "scale", (a,), vjp)


# -- linear algebra --------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    g = _graph_of(a, b)
    if a.value.ndim != 2 or b.value.ndim != 2:
        raise ShapeMismatch("matmul expects 2-D operands")
    if a.value.shape[1] != b.value.shape[0]:
        raise ShapeMismatch(
            f"inner dimensions disagree: {a.value.shape} x {b.value.shape}"
        )

    def vjp(gout):
        return matmul(gout, transpose(b)), matmul(transpose(a), gout)

    return _op(g, a.value @ b.value, "matmul", (a, b), vjp)


def transpose(a: Tensor) -> Tensor:
    # tensors are immutable once created, so a view is safe here
    if a.value.ndim != 2:
        raise ShapeMismatch("transpose expects a 2-D tensor")

    def vjp(gout):
        return (transpose(gout),)

    return _op(a.graph, a.value.T, "transpose", (a,), vjp)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    old = a.value.shape
    try:
        v = a.value.reshape(shape)
    except ValueError as e:
        raise ShapeMismatch(str(e)) from None

    def vjp(gout):
        return (reshape(gout, old),)

    return _op(a.graph, v, "reshape", (a,), vjp)


# -- reductions and broadcasting -------------------------------------------


def reduce_sum(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    in_shape = a.value.shape
    v = a.value.sum(axis=axis, keepdims=keepdims)

    def vjp(gout):
        g2 = gout
        if axis is None:
            if not keepdims and in_shape:
                g2 = reshape(g2, (1,) * len(in_shape))
        elif not keepdims:
            kshape = list(in_shape)
            kshape[axis] = 1
            g2 = reshape(g2, kshape)
        return (broadcast_to(g2, in_shape),)

    return _op(a.graph, v, "sum", (a,), vjp)


def reduce_mean(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    n = a.value.size if axis is None else a.value.shape[axis]
    return scale(reduce_sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def broadcast_to(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    in_shape = a.value.shape
    try:
        v = np.broadcast_to(a.value, shape)
    except ValueError as e:
        raise ShapeMismatch(str(e)) from None

    def vjp(gout):
        return (_sum_to(gout, in_shape),)

    return _op(a.graph, v, "broadcast", (a,), vjp)


# -- slicing ---------------------------------------------------------------


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    n = a.value.shape[axis]
    if start < 0 or length < 0 or start + length > n:
        raise ShapeMismatch(
            f"narrow [{start}:{start + length}] out of range for axis of size {n}"
        )
    idx = [slice(None)] * a.value.ndim
    idx[axis] = slice(start, start + length)
    v = a.value[tuple(idx)]

    def vjp(gout):
        return (pad_axis(gout, axis, start, n - start - length),)

    return _op(a.graph, v, "narrow", (a,), vjp)


def pad_axis(a: Tensor, axis: int, before: int, after: int) -> Tensor:
    length = a.value.shape[axis]
    shape = list(a.value.shape)
    shape[axis] = before + length + after
    v = np.zeros(shape)
    idx = [slice(None)] * a.value.ndim
    idx[axis] = slice(before, before + length)
    v[tuple(idx)] = a.value

    def vjp(gout):
        return (narrow(gout, axis, before, length),)

    return _op(a.graph, v, "pad", (a,), vjp)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    g = _graph_of(*tensors)
    try:
        v = np.concatenate([t.value for t in tensors], axis=axis)
    except ValueError as e:
        raise ShapeMismatch(str(e)) from None
    sizes = [t.value.shape[axis] for t in tensors]

    def vjp(gout):
        outs = []
        offset = 0
        for s in sizes:
            outs.append(narrow(gout, axis, offset, s))
            offset += s
        return tuple(outs)

    return _op(g, v, "concat", tensors, vjp)


# -- elementwise nonlinearities ---------------------------------------------


def exp(a: Tensor) -> Tensor:
    v = np.exp(a.value)

    def make(out):
        def vjp(gout):
            return (mul(gout, out),)

        return vjp

    out = _op(a.graph, v, "exp", (a,), None)
    out._vjp = make(out) if out.nid >= 0 else None
    return out


def log(a: Tensor) -> Tensor:
    def vjp(gout):
        return (mul(gout, reciprocal(a)),)

    return _op(a.graph, np.log(a.value), "log", (a,), vjp)


def reciprocal(a: Tensor) -> Tensor:
    v = 1.0 / a.value

    def make(out):
        def vjp(gout):
            return (neg(mul(gout, mul(out, out))),)

        return vjp

    out = _op(a.graph, v, "reciprocal", (a,), None)
    out._vjp = make(out) if out.nid >= 0 else None
    return out


def sigmoid(a: Tensor) -> Tensor:
    x = a.value
    v = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def make(out):
        def vjp(gout):
            one = out.graph.constant(1.0)
            return (mul(gout, mul(out, sub(one, out))),)

        return vjp

    out = _op(a.graph, v, "sigmoid", (a,), None)
    out._vjp = make(out) if out.nid >= 0 else None
    return out


def relu(a: Tensor) -> Tensor:
    # subgradient at 0 is 0 by convention
    mask = (a.value > 0).astype(np.float64)

    def vjp(gout):
        return (mul(gout, gout.graph.constant(mask)),)

    return _op(a.graph, np.maximum(a.value, 0.0), "relu", (a,), vjp)


def dropout(x: Tensor, p: float, mode: Mode, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: Eval mode is exactly the identity."""
    if not (0.0 <= p < 1.0):
        raise InvalidProbability(f"dropout probability {p} outside [0, 1)")
    if mode is Mode.EVAL or p == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in Train mode requires an rng")
    keep = (rng.random(x.value.shape) >= p).astype(np.float64)
    mask = keep / (1.0 - p)
    return mul(x, x.graph.constant(mask))


# -- loss -------------------------------------------------------------------


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label].

    Built from primitive ops (with a constant max-shift for stability),
    so gradients and second-order gradients follow from the primitives.
    """
    if logits.value.ndim != 2:
        raise ShapeMismatch("logits must be 2-D (batch x classes)")
    b, k = logits.value.shape
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    if y.shape[0] != b:
        raise ShapeMismatch(f"{y.shape[0]} labels for batch of {b}")
    if y.size and (y.min() < 0 or y.max() >= k):
        raise LabelOutOfRange(f"labels must lie in [0, {k})")
    g = logits.graph
    shift = g.constant(logits.value.max(axis=1, keepdims=True))
    z = sub(logits, shift)
    lse = log(reduce_sum(exp(z), axis=1, keepdims=True))
    logp = sub(z, lse)
    onehot = np.zeros((b, k))
    onehot[np.arange(b), y] = 1.0
    picked = reduce_sum(mul(logp, g.constant(onehot)))
    return scale(neg(picked), 1.0 / b)


# -- backward pass ----------------------------------------------------------


def grad(loss: Tensor, wrt, mode: GradMode = GradMode.SECOND_ORDER) -> list[Tensor]:
    """Gradients of a scalar loss with respect to each tensor in `wrt`.

    In SECOND_ORDER mode the returned tensors are recorded nodes and can
    be differentiated again; in FIRST_ORDER mode they are detached
    constants. Targets the loss does not depend on get a zero tensor.
    """
    if loss.value.size != 1:
        raise NonScalarLoss(f"loss has shape {loss.value.shape}")
    g = loss.graph
    wrt = list(wrt)

    def walk():
        # sparse walk over nodes that receive an adjoint, in strictly
        # decreasing nid (inputs always precede their node, so every
        # push goes below the current id): exact reverse append order
        adjoints: dict[int, Tensor] = {}
        if loss.nid >= 0:
            nodes = g.nodes
            adjoints[loss.nid] = g.constant(np.ones_like(loss.value))
            heap = [-loss.nid]
            queued = {loss.nid}
            while heap:
                nid = -heapq.heappop(heap)
                node = nodes[nid]
                if node._vjp is None:
                    continue
                a = adjoints[nid]
                for inp, ga in zip(node.inputs, node._vjp(a)):
                    if ga is None or inp.nid < 0:
                        continue
                    iid = inp.nid
                    cur = adjoints.get(iid)
                    adjoints[iid] = ga if cur is None else add(cur, ga)
                    if iid not in queued:
                        queued.add(iid)
                        heapq.heappush(heap, -iid)
        out = []
        for w in wrt:
            t = adjoints.get(w.nid) if w.nid >= 0 else None
            if t is None:
                t = g.constant(np.zeros_like(w.value))
            out.append(t)
        return out

    if mode is GradMode.SECOND_ORDER:
        return walk()
    with g.paused():
        return walk()
