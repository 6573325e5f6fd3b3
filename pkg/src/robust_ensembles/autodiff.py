"""Reverse-mode differentiation over numpy arrays.

A Graph records primitive operations in creation order, which is also a
topological order. The primitive set is closed under differentiation for the
activations we use (softplus' = sigmoid, tanh' = tanh_deriv), so the input
gradient of a classifier can be written as ordinary graph nodes and then
differentiated again with respect to the parameters.

Leading batch axes are allowed everywhere; binary elementwise operations follow
numpy broadcasting and reduce adjoints back to the operand shapes.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np


class ConfigurationError(ValueError):
    pass


class UsageError(ValueError):
    pass


@dataclass(frozen=True)
class Primitive:
    name: str
    forward: Callable
    vjp: Callable  # (g, input values, output value, attrs) -> list of input adjoints


PRIMITIVES: dict[str, Primitive] = {}


def _register(name, forward, vjp):
    PRIMITIVES[name] = Primitive(name, forward, vjp)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus_value(x):
    x = np.asarray(x, dtype=float)
    return np.where(x > 30.0, x, np.log1p(np.exp(np.minimum(x, 30.0))))


def sigmoid_value(x):
    return _sigmoid(np.asarray(x, dtype=float))


_register("add", lambda v, a: v[0] + v[1],
          lambda g, v, out, a: [_unbroadcast(g, v[0].shape), _unbroadcast(g, v[1].shape)])
_register("sub", lambda v, a: v[0] - v[1],
          lambda g, v, out, a: [_unbroadcast(g, v[0].shape), _unbroadcast(-g, v[1].shape)])
_register("mul", lambda v, a: v[0] * v[1],
          lambda g, v, out, a: [_unbroadcast(g * v[1], v[0].shape), _unbroadcast(g * v[0], v[1].shape)])
_register("div", lambda v, a: v[0] / v[1],
          lambda g, v, out, a: [_unbroadcast(g / v[1], v[0].shape),
                                _unbroadcast(-g * out / v[1], v[1].shape)])
_register("neg", lambda v, a: -v[0], lambda g, v, out, a: [-g])
_register("exp", lambda v, a: np.exp(v[0]), lambda g, v, out, a: [g * out])
_register("log", lambda v, a: np.log(v[0]), lambda g, v, out, a: [g / v[0]])
_register("softplus", lambda v, a: softplus_value(v[0]), lambda g, v, out, a: [g * _sigmoid(v[0])])


def _sigmoid_vjp(g, v, out, a):
    return [g * out * (1.0 - out)]


_register("sigmoid", lambda v, a: _sigmoid(v[0]), _sigmoid_vjp)
_register("tanh", lambda v, a: np.tanh(v[0]), lambda g, v, out, a: [g * (1.0 - out * out)])


def _tanh_deriv_vjp(g, v, out, a):
    t = np.tanh(v[0])
    return [g * (-2.0 * t * out)]


_register("tanh_deriv", lambda v, a: 1.0 - np.tanh(v[0]) ** 2, _tanh_deriv_vjp)


# matvec(W, x) = x @ W.T applies W to each row of x; matvec_t(W, x) = x @ W applies W transposed
def _matvec_vjp(g, v, out, a):
    w, x = v
    gw = g.reshape(-1, w.shape[0]).T @ x.reshape(-1, w.shape[1])
    return [gw, g @ w]


def _matvec_t_vjp(g, v, out, a):
    w, x = v
    gw = x.reshape(-1, w.shape[0]).T @ g.reshape(-1, w.shape[1])
    return [gw, g @ w.T]


_register("matvec", lambda v, a: v[1] @ v[0].T, _matvec_vjp)
_register("matvec_t", lambda v, a: v[1] @ v[0], _matvec_t_vjp)


def _sum_forward(v, a):
    return np.sum(v[0], axis=a["axis"], keepdims=a["keepdims"])


def _sum_vjp(g, v, out, a):
    axis = a["axis"]
    if axis is not None and not a["keepdims"]:
        g = np.expand_dims(g, axis)
    return [np.broadcast_to(g, v[0].shape).copy()]


_register("sum", _sum_forward, _sum_vjp)


def _l2norm_forward(v, a):
    return np.sqrt(np.sum(v[0] * v[0], axis=a["axis"], keepdims=a["keepdims"]))


def _l2norm_vjp(g, v, out, a):
    axis = a["axis"]
    if axis is not None and not a["keepdims"]:
        g = np.expand_dims(g, axis)
        out = np.expand_dims(out, axis)
    safe = np.where(out > 0, out, 1.0)
    # the norm is not differentiable at 0; use the zero subgradient there
    return [np.where(out > 0, g * v[0] / safe, 0.0)]


_register("l2norm", _l2norm_forward, _l2norm_vjp)


def _stack_vjp(g, v, out, a):
    return [np.take(g, i, axis=a["axis"]) for i in range(len(v))]


_register("stack", lambda v, a: np.stack(v, axis=a["axis"]), _stack_vjp)


def _adjugate_t(m: np.ndarray) -> np.ndarray:
    # cofactor matrix of each trailing square block (= d det / d m)
    n = m.shape[-1]
    if n == 1:
        return np.ones_like(m)
    cof = np.empty_like(m)
    for i in range(n):
        for j in range(n):
            minor = np.delete(np.delete(m, i, axis=-2), j, axis=-1)
            cof[..., i, j] = (-1) ** (i + j) * np.linalg.det(minor)
    return cof


_register("det", lambda v, a: np.linalg.det(v[0]),
          lambda g, v, out, a: [g[..., None, None] * _adjugate_t(v[0])])


class Node:
    __slots__ = ("graph", "index", "op", "inputs", "attrs", "value", "name", "trainable", "requires_grad")

    def __init__(self, graph, index, op, inputs, attrs, value, name=None, trainable=False):
        self.graph = graph
        self.index = index
        self.op = op
        self.inputs = inputs
        self.attrs = attrs
        self.value = value
        self.name = name
        self.trainable = trainable
        self.requires_grad = trainable or any(p.requires_grad for p in inputs)

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        label = self.name or self.op
        return f"Node({label}#{self.index}, shape={self.value.shape})"

    def _lift(self, other):
        return other if isinstance(other, Node) else self.graph.const(other)

    def __add__(self, other):
        return self.graph.apply("add", self, self._lift(other))

    def __radd__(self, other):
        return self.graph.apply("add", self._lift(other), self)

    def __sub__(self, other):
        return self.graph.apply("sub", self, self._lift(other))

    def __rsub__(self, other):
        return self.graph.apply("sub", self._lift(other), self)

    def __mul__(self, other):
        return self.graph.apply("mul", self, self._lift(other))

    def __rmul__(self, other):
        return self.graph.apply("mul", self._lift(other), self)

    def __truediv__(self, other):
        return self.graph.apply("div", self, self._lift(other))

    def __rtruediv__(self, other):
        return self.graph.apply("div", self._lift(other), self)

    def __neg__(self):
        return self.graph.apply("neg", self)


class Graph:
    """An append-only list of nodes; creation order is topological order."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.leaves: dict[str, Node] = {}
        self.visits = 0

    def _add(self, op, inputs, attrs, value, name=None, trainable=False) -> Node:
        node = Node(self, len(self.nodes), op, tuple(inputs), attrs, value, name, trainable)
        self.nodes.append(node)
        return node

    def leaf(self, value, name: str) -> Node:
        """A differentiable input (parameter or input tensor) identified by `name`."""
        if name in self.leaves:
            raise UsageError(f"duplicate leaf name {name!r}")
        node = self._add("leaf", (), {}, np.array(value, dtype=float), name, trainable=True)
        self.leaves[name] = node
        return node

    def const(self, value) -> Node:
        return self._add("const", (), {}, np.asarray(value, dtype=float))

    def apply(self, op: str, *inputs: Node, **attrs) -> Node:
        for p in inputs:
            if p.graph is not self:
                raise UsageError("operands belong to different graphs")
        prim = PRIMITIVES[op]
        value = prim.forward([p.value for p in inputs], attrs)
        return self._add(op, inputs, attrs, np.asarray(value, dtype=float))

    def set_leaf(self, name: str, value) -> None:
        leaf = self.leaves[name]
        value = np.asarray(value, dtype=float)
        if value.shape != leaf.value.shape:
            raise UsageError(f"shape mismatch for leaf {name!r}")
        leaf.value = value.copy()

    def recompute(self) -> None:
        """Re-evaluate every operation from the current leaf values."""
        for node in self.nodes:
            if node.op in ("leaf", "const"):
                continue
            prim = PRIMITIVES[node.op]
            node.value = np.asarray(prim.forward([p.value for p in node.inputs], node.attrs), dtype=float)

    def __len__(self):
        return len(self.nodes)


# functional spellings of the primitives

def add(a, b): return a.graph.apply("add", a, a._lift(b))
def sub(a, b): return a.graph.apply("sub", a, a._lift(b))
def mul(a, b): return a.graph.apply("mul", a, a._lift(b))
def div(a, b): return a.graph.apply("div", a, a._lift(b))
def neg(a): return a.graph.apply("neg", a)
def exp(a): return a.graph.apply("exp", a)
def log(a): return a.graph.apply("log", a)
def softplus(a): return a.graph.apply("softplus", a)
def sigmoid(a): return a.graph.apply("sigmoid", a)
def tanh(a): return a.graph.apply("tanh", a)
def tanh_deriv(a): return a.graph.apply("tanh_deriv", a)
def matvec(w, x): return w.graph.apply("matvec", w, x)
def matvec_t(w, x): return w.graph.apply("matvec_t", w, x)
def det(a): return a.graph.apply("det", a)


def sum(a, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy
    return a.graph.apply("sum", a, axis=axis, keepdims=keepdims)


def l2norm(a, axis=-1, keepdims=False):
    return a.graph.apply("l2norm", a, axis=axis, keepdims=keepdims)


def stack(nodes: Sequence[Node], axis=-1):
    return nodes[0].graph.apply("stack", *nodes, axis=axis)


class GradientMap(dict):
    """Leaf name -> adjoint array with the leaf's shape."""


def backward(graph: Graph, output: Node, leaves: Iterable | None = None) -> GradientMap:
    """Adjoints of `output` with respect to the graph's leaves, by one reverse sweep."""
    if output.graph is not graph:
        raise UsageError("output node is not part of this graph")
    if output.value.size != 1:
        raise UsageError(f"backward needs a scalar output, got shape {output.value.shape}")
    adj: dict[int, np.ndarray] = {output.index: np.ones_like(output.value)}
    visits = 0
    for node in reversed(graph.nodes[: output.index + 1]):
        g = adj.pop(node.index, None)
        if g is None or not node.inputs:
            if g is not None:
                adj[node.index] = g
            continue
        visits += 1
        grads = PRIMITIVES[node.op].vjp(g, [p.value for p in node.inputs], node.value, node.attrs)
        for parent, pg in zip(node.inputs, grads):
            if not parent.requires_grad:
                continue
            if parent.index in adj:
                adj[parent.index] = adj[parent.index] + pg
            else:
                adj[parent.index] = np.array(pg, dtype=float)
    graph.visits = visits
    names = graph.leaves.keys() if leaves is None else [_leaf_name(graph, l) for l in leaves]
    out = GradientMap()
    for name in names:
        leaf = graph.leaves[name]
        g = adj.get(leaf.index)
        out[name] = np.zeros_like(leaf.value) if g is None else g.reshape(leaf.value.shape)
    return out


def _leaf_name(graph: Graph, leaf) -> str:
    if isinstance(leaf, Node):
        if leaf.name not in graph.leaves or graph.leaves[leaf.name] is not leaf:
            raise UsageError("node is not a leaf of this graph")
        return leaf.name
    return leaf


def gradient_check(graph: Graph, output: Node, leaves: Iterable | None = None, h: float = 1e-5) -> float:
    """Largest componentwise relative error between backward and central differences.

    The relative error of a pair (a, b) is |a - b| / max(|a|, |b|, 1e-8).
    """
    if h <= 0:
        raise ValueError("h must be positive")
    names = list(graph.leaves) if leaves is None else [_leaf_name(graph, l) for l in leaves]
    analytic = backward(graph, output, names)
    worst = 0.0
    for name in names:
        leaf = graph.leaves[name]
        base = leaf.value.copy()
        flat = leaf.value.reshape(-1)
        for i in range(flat.size):
            orig = base.flat[i]
            flat[i] = orig + h
            graph.recompute()
            up = float(output.value.sum())
            flat[i] = orig - h
            graph.recompute()
            down = float(output.value.sum())
            flat[i] = orig
            numeric = (up - down) / (2.0 * h)
            a = float(analytic[name].flat[i])
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
        leaf.value = base
    graph.recompute()
    return worst


# classifier sub-graphs

SMOOTH_ACTIVATIONS = ("softplus", "tanh")


class BoundMlp:
    """An MLP whose parameters live in a graph, either as leaves or as constants.

    `model` needs `layers` (list of (W, b)) and `activation`.
    """

    def __init__(self, graph: Graph, model, prefix: str | None = None):
        self.graph = graph
        self.model = model
        self.activation = model.activation
        self.params: list[tuple[Node, Node]] = []
        for l, (w, b) in enumerate(model.layers):
            if prefix is None:
                self.params.append((graph.const(w), graph.const(b)))
            else:
                self.params.append((graph.leaf(w, f"{prefix}.W{l}"), graph.leaf(b, f"{prefix}.b{l}")))
        self._cache: dict[int, "ForwardNodes"] = {}

    @property
    def leaf_names(self) -> list[str]:
        return [n.name for pair in self.params for n in pair if n.trainable]

    def activate(self, a: Node) -> Node:
        if self.activation == "softplus":
            return softplus(a)
        if self.activation == "tanh":
            return tanh(a)
        raise ConfigurationError(f"unsupported activation {self.activation!r}")

    def activation_derivative(self, a: Node) -> Node:
        if self.activation == "softplus":
            return sigmoid(a)
        if self.activation == "tanh":
            return tanh_deriv(a)
        raise ConfigurationError(f"activation {self.activation!r} is not twice differentiable")

    def forward(self, x: Node) -> "ForwardNodes":
        cached = self._cache.get(x.index)
        if cached is not None:
            return cached
        pre = []
        h = x
        for l, (w, b) in enumerate(self.params):
            a = matvec(w, h) + b
            if l < len(self.params) - 1:
                pre.append(a)
                h = self.activate(a)
            else:
                logits = a
        # max-logit shift is a constant: softmax is invariant to it
        shift = self.graph.const(np.max(logits.value, axis=-1, keepdims=True))
        z = logits - shift
        e = exp(z)
        s = sum(e, axis=-1, keepdims=True)
        probs = e / s
        log_probs = z - log(s)
        fwd = ForwardNodes(x, pre, logits, probs, log_probs)
        self._cache[x.index] = fwd
        return fwd

    def backprop_to_input(self, x: Node, logit_adjoint: Node) -> Node:
        """Explicit chain rule from a logit-space adjoint back to the input."""
        if self.activation not in SMOOTH_ACTIVATIONS:
            raise ConfigurationError(f"activation {self.activation!r} is not twice differentiable")
        fwd = self.forward(x)
        g = logit_adjoint
        for l in range(len(self.params) - 1, -1, -1):
            g = matvec_t(self.params[l][0], g)
            if l > 0:
                g = g * self.activation_derivative(fwd.pre[l - 1])
        return g


@dataclass
class ForwardNodes:
    x: Node
    pre: list
    logits: Node
    probs: Node
    log_probs: Node


def one_hot(labels, num_classes: int, rows: int | None = None) -> np.ndarray:
    labels = np.asarray(labels, dtype=int)
    if labels.ndim == 0:
        out = np.zeros(num_classes) if rows is None else np.zeros((rows, num_classes))
        out[..., int(labels)] = 1.0
        return out
    out = np.zeros((labels.size, num_classes))
    out[np.arange(labels.size), labels] = 1.0
    return out


def input_gradient_node(bound: BoundMlp, x: Node, y1, y2) -> Node:
    """Node computing the input gradient of f_{y1} - f_{y2}.

    `y1`, `y2` are class labels (scalars or one per row of `x`) and are held
    as constants. With f the softmax output, the logit-space adjoint of the
    margin is f * (e_{y1} - e_{y2} - (f_{y1} - f_{y2})).
    """
    if not isinstance(bound, BoundMlp):
        raise UsageError("input_gradient_node needs a BoundMlp")
    fwd = bound.forward(x)
    c = fwd.probs.value.shape[-1]
    rows = None if fwd.probs.value.ndim == 1 else fwd.probs.value.shape[0]
    diff = bound.graph.const(one_hot(y1, c, rows) - one_hot(y2, c, rows))
    gap = sum(fwd.probs * diff, axis=-1, keepdims=True)
    return bound.backprop_to_input(x, fwd.probs * (diff - gap))


def cross_entropy_input_gradient_node(bound: BoundMlp, x: Node, y) -> Node:
    """Node computing the input gradient of -log f_y (logit adjoint f - e_y)."""
    fwd = bound.forward(x)
    c = fwd.probs.value.shape[-1]
    rows = None if fwd.probs.value.ndim == 1 else fwd.probs.value.shape[0]
    return bound.backprop_to_input(x, fwd.probs - bound.graph.const(one_hot(y, c, rows)))
