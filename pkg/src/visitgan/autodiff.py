"""Reverse-mode automatic differentiation over dense numpy arrays.

Expressions built from the primitives below record a DAG of ``Node`` objects.
``backward`` walks the DAG once and returns exact gradients for every leaf
that requires them.  Backward rules are themselves written in terms of the
same primitives, so ``grad`` can return a gradient as a live graph node whose
own backward pass yields correct second-order derivatives (the critic's
input-gradient penalty differentiates a function of a gradient).

Dtype is taken from the inputs and preserved: training code runs in float32,
the oracle tests drive the same engine in float64.
"""

from __future__ import annotations

import contextlib
import itertools

import numpy as np

# Lower clamp applied to logarithm arguments; cross-entropy terms and the
# evaluation metrics hit exact zeros otherwise.
LOG_CLAMP = 1e-12

_recording = True
_ids = itertools.count()


@contextlib.contextmanager
def recording(enabled: bool):
    """Toggle graph recording inside a ``with`` block.

    With recording off, operations still compute values but produce history-free
    constants, so no gradients can flow out of the block.
    """
    global _recording
    prev = _recording
    _recording = enabled
    try:
        yield
    finally:
        _recording = prev


class Node:
    """A tensor enrolled in the differentiation graph.

    Leaves (``kind == "leaf"``) carry raw values; interior nodes remember the
    producing operation and its parents so the graph can be traversed in
    reverse or replayed forward.
    """

    __slots__ = ("id", "value", "kind", "parents", "aux", "requires_grad", "name")

    def __init__(self, value, *, kind="leaf", parents=(), aux=None,
                 requires_grad=False, name=None):
        self.id = next(_ids)
        self.value = np.asarray(value)
        self.kind = kind
        self.parents = tuple(parents)
        self.aux = aux or {}
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def __repr__(self):
        tag = self.name or self.kind
        return f"Node({tag}, shape={self.value.shape}, grad={self.requires_grad})"

    # Arithmetic sugar; python scalars route through the scalar primitives.
    def __add__(self, other):
        return add_const(self, float(other)) if np.isscalar(other) else add(self, other)

    def __radd__(self, other):
        return add_const(self, float(other))

    def __sub__(self, other):
        return add_const(self, -float(other)) if np.isscalar(other) else sub(self, other)

    def __rsub__(self, other):
        return add_const(scalar_mul(self, -1.0), float(other))

    def __mul__(self, other):
        return scalar_mul(self, float(other)) if np.isscalar(other) else mul(self, other)

    def __rmul__(self, other):
        return scalar_mul(self, float(other))

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def leaf(value, requires_grad=False, name=None, dtype=None):
    """Wrap an array as a graph leaf."""
    arr = np.asarray(value, dtype=dtype)
    return Node(arr, requires_grad=requires_grad, name=name)


def constant(value, dtype=None):
    """Wrap an array as a non-differentiable constant."""
    return Node(np.asarray(value, dtype=dtype))


def _make(kind, parents, value, aux=None):
    if _recording and any(p.requires_grad for p in parents):
        return Node(value, kind=kind, parents=parents, aux=aux, requires_grad=True)
    return Node(value)


def _shapes(nodes):
    return ", ".join(str(n.value.shape) for n in nodes)


# ---------------------------------------------------------------------------
# forward implementations (ndarray -> ndarray), keyed by kind for replay
# ---------------------------------------------------------------------------

def _fw_concat(*vals, axis):
    return np.concatenate(vals, axis=axis)


def _fw_softmax(x, *, axis):
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def _fw_sigmoid(x):
    # exp overflow at large |x| saturates to exactly 0/1, which is the limit
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-x))


_FORWARD = {
    "matmul": lambda a, b: a @ b,
    "add": lambda a, b: a + b,
    "sub": lambda a, b: a - b,
    "mul": lambda a, b: a * b,
    "div": lambda a, b: a / b,
    "scalar_mul": lambda x, *, c: x * c,
    "add_const": lambda x, *, c: x + c,
    "sigmoid": _fw_sigmoid,
    "tanh": np.tanh,
    "log": lambda x: np.log(np.maximum(x, LOG_CLAMP)),
    "square": lambda x: x * x,
    "sqrt": np.sqrt,
    "min_const": lambda x, *, c: np.minimum(x, c),
    "max_const": lambda x, *, c: np.maximum(x, c),
    "concat": _fw_concat,
    "mean": lambda x, *, axis: np.mean(x, axis=axis),
    "sum": lambda x, *, axis, keepdims: np.sum(x, axis=axis, keepdims=keepdims),
    "norm_rows": lambda x: np.sqrt(np.sum(x * x, axis=1)),
    "softmax": _fw_softmax,
    "transpose": lambda x: x.T,  # view; BLAS consumes transposed strides directly
    "reshape": lambda x, *, shape: np.reshape(x, shape),
    "narrow": lambda x, *, axis, start, stop: np.ascontiguousarray(
        x[(slice(None),) * axis + (slice(start, stop),)]),
    "broadcast_to": lambda x, *, shape: np.ascontiguousarray(np.broadcast_to(x, shape)),
}


# ---------------------------------------------------------------------------
# public operations
# ---------------------------------------------------------------------------

def matmul(a, b):
    if a.value.ndim != 2 or b.value.ndim != 2 or a.value.shape[1] != b.value.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {_shapes([a, b])}")
    return _make("matmul", (a, b), _FORWARD["matmul"](a.value, b.value))


def _elementwise(kind, a, b):
    try:
        np.broadcast_shapes(a.value.shape, b.value.shape)
    except ValueError:
        raise ValueError(f"{kind}: shapes do not broadcast {_shapes([a, b])}") from None
    return _make(kind, (a, b), _FORWARD[kind](a.value, b.value))


def add(a, b):
    return _elementwise("add", a, b)


def sub(a, b):
    return _elementwise("sub", a, b)


def mul(a, b):
    return _elementwise("mul", a, b)


def div(a, b):
    return _elementwise("div", a, b)


def scalar_mul(x, c):
    c = float(c)
    return _make("scalar_mul", (x,), _FORWARD["scalar_mul"](x.value, c=c), {"c": c})


def add_const(x, c):
    c = float(c)
    return _make("add_const", (x,), _FORWARD["add_const"](x.value, c=c), {"c": c})


def sigmoid(x):
    return _make("sigmoid", (x,), _FORWARD["sigmoid"](x.value))


def tanh(x):
    return _make("tanh", (x,), _FORWARD["tanh"](x.value))


def log(x):
    return _make("log", (x,), _FORWARD["log"](x.value))


def square(x):
    return _make("square", (x,), _FORWARD["square"](x.value))


def sqrt(x):
    return _make("sqrt", (x,), _FORWARD["sqrt"](x.value))


def min_const(x, c):
    c = float(c)
    return _make("min_const", (x,), _FORWARD["min_const"](x.value, c=c), {"c": c})


def max_const(x, c):
    c = float(c)
    return _make("max_const", (x,), _FORWARD["max_const"](x.value, c=c), {"c": c})


def relu(x):
    return max_const(x, 0.0)


def concat(nodes, axis=0):
    nodes = tuple(nodes)
    if not nodes:
        raise ValueError("concat: needs at least one input")
    ref = list(nodes[0].value.shape)
    for n in nodes[1:]:
        got = list(n.value.shape)
        if len(got) != len(ref) or any(g != r for i, (g, r) in enumerate(zip(got, ref)) if i != axis):
            raise ValueError(f"concat: incompatible shapes along axis {axis}: {_shapes(nodes)}")
    return _make("concat", nodes, _FORWARD["concat"](*[n.value for n in nodes], axis=axis),
                 {"axis": axis})


def mean(x, axis=None):
    return _make("mean", (x,), _FORWARD["mean"](x.value, axis=axis), {"axis": axis})


def sum(x, axis=None, keepdims=False):  # noqa: A001 - numpy-style reduction name
    return _make("sum", (x,), _FORWARD["sum"](x.value, axis=axis, keepdims=keepdims),
                 {"axis": axis, "keepdims": keepdims})


def norm_rows(x):
    """Per-row Euclidean norm of a 2-D tensor: (n, m) -> (n,)."""
    if x.value.ndim != 2:
        raise ValueError(f"norm_rows: expected a 2-D tensor, got shape {x.value.shape}")
    return _make("norm_rows", (x,), _FORWARD["norm_rows"](x.value))


def softmax(x, axis=-1):
    return _make("softmax", (x,), _FORWARD["softmax"](x.value, axis=axis), {"axis": axis})


def transpose(x):
    if x.value.ndim != 2:
        raise ValueError(f"transpose: expected a 2-D tensor, got shape {x.value.shape}")
    return _make("transpose", (x,), _FORWARD["transpose"](x.value))


def reshape(x, shape):
    shape = tuple(shape)
    if int(np.prod(shape)) != x.value.size:
        raise ValueError(f"reshape: cannot reshape {x.value.shape} to {shape}")
    return _make("reshape", (x,), _FORWARD["reshape"](x.value, shape=shape), {"shape": shape})


def narrow(x, axis, start, stop):
    """Contiguous slice [start, stop) along one axis."""
    extent = x.value.shape[axis]
    if not (0 <= start < stop <= extent):
        raise ValueError(f"narrow: [{start}, {stop}) out of range for axis {axis} of {x.value.shape}")
    return _make("narrow", (x,), _FORWARD["narrow"](x.value, axis=axis, start=start, stop=stop),
                 {"axis": axis, "start": start, "stop": stop})


def broadcast_to(x, shape):
    shape = tuple(shape)
    return _make("broadcast_to", (x,), _FORWARD["broadcast_to"](x.value, shape=shape),
                 {"shape": shape})


# Kind registry: every differentiable primitive, keyed by the name used in the
# graph.  Tests sweep this table with the finite-difference oracle.
KINDS = {
    "matmul": matmul,
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "scalar_mul": scalar_mul,
    "add_const": add_const,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "log": log,
    "square": square,
    "sqrt": sqrt,
    "min_const": min_const,
    "max_const": max_const,
    "concat": concat,
    "mean": mean,
    "sum": sum,
    "norm_rows": norm_rows,
    "softmax": softmax,
    "transpose": transpose,
    "reshape": reshape,
    "narrow": narrow,
    "broadcast_to": broadcast_to,
}


# ---------------------------------------------------------------------------
# backward rules
#
# Each rule maps (node, upstream gradient node, needs) to per-parent gradient
# nodes, computing only the entries where needs[i] is True.  Rules are built
# from the primitives above, which keeps them differentiable for second-order
# use; whether they record history is controlled by the recording flag.
# ---------------------------------------------------------------------------

def _sum_to(g, shape):
    """Reduce a broadcast gradient back to the target shape."""
    if g.value.shape == shape:
        return g
    extra = g.value.ndim - len(shape)
    if extra > 0:
        g = sum(g, axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ts) in enumerate(zip(g.value.shape, shape)) if ts == 1 and gs != 1)
    if axes:
        g = sum(g, axis=axes, keepdims=True)
    if g.value.shape != shape:
        g = reshape(g, shape)
    return g


def _bw_matmul(node, g, needs):
    a, b = node.parents
    ga = matmul(g, transpose(b)) if needs[0] else None
    gb = matmul(transpose(a), g) if needs[1] else None
    return ga, gb


def _bw_add(node, g, needs):
    a, b = node.parents
    return (_sum_to(g, a.value.shape) if needs[0] else None,
            _sum_to(g, b.value.shape) if needs[1] else None)


def _bw_sub(node, g, needs):
    a, b = node.parents
    return (_sum_to(g, a.value.shape) if needs[0] else None,
            _sum_to(scalar_mul(g, -1.0), b.value.shape) if needs[1] else None)


def _bw_mul(node, g, needs):
    a, b = node.parents
    return (_sum_to(mul(g, b), a.value.shape) if needs[0] else None,
            _sum_to(mul(g, a), b.value.shape) if needs[1] else None)


def _bw_div(node, g, needs):
    a, b = node.parents
    ga = _sum_to(div(g, b), a.value.shape) if needs[0] else None
    gb = None
    if needs[1]:
        gb = _sum_to(scalar_mul(div(mul(g, a), mul(b, b)), -1.0), b.value.shape)
    return ga, gb


def _bw_scalar_mul(node, g, needs):
    return (scalar_mul(g, node.aux["c"]),)


def _bw_add_const(node, g, needs):
    return (g,)


def _bw_sigmoid(node, g, needs):
    y = node
    return (mul(g, mul(y, add_const(scalar_mul(y, -1.0), 1.0))),)


def _bw_tanh(node, g, needs):
    y = node
    return (mul(g, add_const(scalar_mul(square(y), -1.0), 1.0)),)


def _bw_log(node, g, needs):
    x = node.parents[0]
    alive = constant((x.value > LOG_CLAMP).astype(x.value.dtype))
    return (mul(div(g, max_const(x, LOG_CLAMP)), alive),)


def _bw_square(node, g, needs):
    x = node.parents[0]
    return (scalar_mul(mul(g, x), 2.0),)


def _bw_sqrt(node, g, needs):
    return (div(scalar_mul(g, 0.5), node),)


def _bw_min_const(node, g, needs):
    # Subgradient convention: the clipped branch (x >= c) gets zero gradient.
    x = node.parents[0]
    alive = constant((x.value < node.aux["c"]).astype(x.value.dtype))
    return (mul(g, alive),)


def _bw_max_const(node, g, needs):
    x = node.parents[0]
    alive = constant((x.value > node.aux["c"]).astype(x.value.dtype))
    return (mul(g, alive),)


def _bw_concat(node, g, needs):
    axis = node.aux["axis"]
    out, offset = [], 0
    for i, p in enumerate(node.parents):
        extent = p.value.shape[axis]
        out.append(narrow(g, axis, offset, offset + extent) if needs[i] else None)
        offset += extent
    return tuple(out)


def _bw_mean(node, g, needs):
    x = node.parents[0]
    axis = node.aux["axis"]
    count = x.value.size if axis is None else x.value.shape[axis]
    return (scalar_mul(_bw_spread(g, x, axis, False), 1.0 / count),)


def _bw_sum(node, g, needs):
    x = node.parents[0]
    return (_bw_spread(g, x, node.aux["axis"], node.aux["keepdims"]),)


def _bw_spread(g, x, axis, keepdims):
    """Expand a reduction gradient back over the reduced input shape."""
    if axis is not None and not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        shape = list(x.value.shape)
        for a in axes:
            shape[a % x.value.ndim] = 1
        g = reshape(g, tuple(shape))
    return broadcast_to(g, x.value.shape)


def _bw_norm_rows(node, g, needs):
    x = node.parents[0]
    n = x.value.shape[0]
    gcol = reshape(g, (n, 1))
    ycol = reshape(node, (n, 1))
    return (mul(gcol, div(x, ycol)),)


def _bw_softmax(node, g, needs):
    axis = node.aux["axis"]
    y = node
    inner = sum(mul(g, y), axis=axis, keepdims=True)
    return (mul(y, sub(g, inner)),)


def _bw_transpose(node, g, needs):
    return (transpose(g),)


def _bw_reshape(node, g, needs):
    return (reshape(g, node.parents[0].value.shape),)


def _bw_narrow(node, g, needs):
    x = node.parents[0]
    axis, start, stop = node.aux["axis"], node.aux["start"], node.aux["stop"]
    pieces = []
    if start > 0:
        shape = list(x.value.shape)
        shape[axis] = start
        pieces.append(constant(np.zeros(shape, dtype=x.value.dtype)))
    pieces.append(g)
    if stop < x.value.shape[axis]:
        shape = list(x.value.shape)
        shape[axis] = x.value.shape[axis] - stop
        pieces.append(constant(np.zeros(shape, dtype=x.value.dtype)))
    return (concat(pieces, axis=axis) if len(pieces) > 1 else g,)


def _bw_broadcast_to(node, g, needs):
    return (_sum_to(g, node.parents[0].value.shape),)


_BACKWARD = {
    "matmul": _bw_matmul,
    "add": _bw_add,
    "sub": _bw_sub,
    "mul": _bw_mul,
    "div": _bw_div,
    "scalar_mul": _bw_scalar_mul,
    "add_const": _bw_add_const,
    "sigmoid": _bw_sigmoid,
    "tanh": _bw_tanh,
    "log": _bw_log,
    "square": _bw_square,
    "sqrt": _bw_sqrt,
    "min_const": _bw_min_const,
    "max_const": _bw_max_const,
    "concat": _bw_concat,
    "mean": _bw_mean,
    "sum": _bw_sum,
    "norm_rows": _bw_norm_rows,
    "softmax": _bw_softmax,
    "transpose": _bw_transpose,
    "reshape": _bw_reshape,
    "narrow": _bw_narrow,
    "broadcast_to": _bw_broadcast_to,
}


# ---------------------------------------------------------------------------
# graph traversal
# ---------------------------------------------------------------------------

def _toposort(root):
    """Parents-before-children ordering of the graph reachable from root."""
    order, visited, stack = [], set(), [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.id in visited:
            continue
        visited.add(node.id)
        stack.append((node, True))
        for p in node.parents:
            if p.id not in visited:
                stack.append((p, False))
    return order


def _reverse(root, create_graph):
    if root.value.size != 1:
        raise ValueError(f"backward: expected a single-element tensor, got shape {root.value.shape}")
    order = _toposort(root)
    grads = {root.id: constant(np.ones_like(root.value))}
    with recording(create_graph):
        for node in reversed(order):
            g = grads.get(node.id)
            if g is None or not node.parents:
                continue
            needs = tuple(p.requires_grad for p in node.parents)
            for parent, pg in zip(node.parents, _BACKWARD[node.kind](node, g, needs)):
                if pg is None or not parent.requires_grad:
                    continue
                acc = grads.get(parent.id)
                grads[parent.id] = pg if acc is None else add(acc, pg)
    return order, grads


def backward(root):
    """Exact reverse-mode gradients of a scalar with respect to every
    requires-grad leaf reachable from it.

    Returns a mapping from leaf nodes to gradient arrays of matching shape.
    """
    order, grads = _reverse(root, create_graph=False)
    return {node: grads[node.id].value for node in order
            if node.requires_grad and not node.parents and node.id in grads}


def grad(root, wrt):
    """Gradient of a scalar with respect to ``wrt``, as a live graph node.

    ``wrt`` may be a single node or a sequence (one reverse traversal serves
    all of them).  The returned node(s) support a further backward pass, which
    yields second-order derivatives.
    """
    single = isinstance(wrt, Node)
    targets = [wrt] if single else list(wrt)
    _, grads = _reverse(root, create_graph=True)
    out = []
    for w in targets:
        g = grads.get(w.id)
        if g is None:
            raise ValueError("grad: target is not reachable from the scalar "
                             "(or does not require grad)")
        out.append(g)
    return out[0] if single else out


def replay(root):
    """Recompute the graph's forward values from its leaves.

    Returns the recomputed root value; with unchanged leaf values this is
    bitwise identical to ``root.value``.
    """
    vals = {}
    for node in _toposort(root):
        if not node.parents:
            vals[node.id] = node.value
        else:
            vals[node.id] = _FORWARD[node.kind](*[vals[p.id] for p in node.parents], **node.aux)
    return vals[root.id]
