"""Tape-based reverse-mode differentiation over dense float64 arrays.

Every op is defined per lane (vector/matrix arithmetic) and applied across any
number of leading lane axes, so one graph evaluates a whole minibatch. Nodes are
appended in creation order, which is already a topological order; ``backward``
walks the tape once in reverse.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class Node:
    __slots__ = ("id", "op", "value", "inputs", "requires_grad", "_backward", "name")

    def __init__(self, id, op, value, inputs=(), requires_grad=False, backward=None, name=None):
        self.id = id
        self.op = op
        self.value = value
        self.inputs = tuple(inputs)
        self.requires_grad = requires_grad
        self._backward = backward
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node({self.id}, {self.op}, shape={self.value.shape})"


def _check_finite(op, value):
    if not np.all(np.isfinite(value)):
        raise NonFiniteError(f"{op} produced a non-finite value")


def _unbroadcast(grad, shape):
    # sum over the leading axes that broadcasting added
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    return grad


class ComputeGraph:
    """Records a forward pass; ``backward`` turns it into parameter gradients."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.parameters: dict[str, Node] = {}

    # -- leaves ---------------------------------------------------------

    def param(self, name: str, value: np.ndarray) -> Node:
        value = np.asarray(value, dtype=np.float64)
        node = self._leaf("param", value, requires_grad=True, name=name)
        self.parameters[name] = node
        return node

    def const(self, value) -> Node:
        return self._leaf("const", np.asarray(value, dtype=np.float64), requires_grad=False)

    def _leaf(self, op, value, requires_grad, name=None):
        node = Node(len(self.nodes), op, value, requires_grad=requires_grad, name=name)
        self.nodes.append(node)
        return node

    def _record(self, op, value, inputs, backward: Callable) -> Node:
        _check_finite(op, value)
        needs = any(x.requires_grad for x in inputs)
        node = Node(len(self.nodes), op, value, inputs, needs, backward if needs else None)
        self.nodes.append(node)
        return node

    # -- ops ------------------------------------------------------------

    def gather(self, table: Node, index) -> Node:
        """Row lookup: ``table[index]`` for an integer index array of any shape."""
        index = np.asarray(index, dtype=np.int64)
        rows = table.value.shape[0]
        if index.size and (index.min() < 0 or index.max() >= rows):
            raise ShapeError(f"gather index out of range for table of {rows} rows")
        value = table.value[index]

        def backward(g):
            full = np.zeros_like(table.value)
            np.add.at(full, index.reshape(-1), g.reshape((-1,) + table.value.shape[1:]))
            return (full,)

        return self._record("gather", value, (table,), backward)

    def matvec(self, W: Node, x: Node) -> Node:
        """``W @ x`` per lane. W is [m, n] (shared) or [..., m, n] matching x's lanes."""
        w, xv = W.value, x.value
        if w.ndim == 2:
            if xv.shape[-1] != w.shape[1]:
                raise ShapeError(f"matvec shape mismatch: {w.shape} @ {xv.shape}")
            value = xv @ w.T

            def backward(g):
                gw = g.reshape(-1, w.shape[0]).T @ xv.reshape(-1, w.shape[1])
                return gw, g @ w
        else:
            if w.shape[:-2] != xv.shape[:-1] or w.shape[-1] != xv.shape[-1]:
                raise ShapeError(f"matvec shape mismatch: {w.shape} @ {xv.shape}")
            value = (w @ xv[..., None])[..., 0]

            def backward(g):
                gw = g[..., :, None] * xv[..., None, :]
                gx = (np.swapaxes(w, -1, -2) @ g[..., None])[..., 0]
                return gw, gx

        return self._record("matvec", value, (W, x), backward)

    def matmul(self, A: Node, B: Node) -> Node:
        a, b = A.value, B.value
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

        def backward(g):
            return g @ b.T, a.T @ g

        return self._record("matmul", a @ b, (A, B), backward)

    def add(self, a: Node, b: Node) -> Node:
        """Elementwise sum. ``b`` may be a bias whose shape is a suffix of ``a``'s."""
        av, bv = a.value, b.value
        if av.shape != bv.shape and av.shape[av.ndim - bv.ndim:] != bv.shape:
            raise ShapeError(f"add shape mismatch: {av.shape} + {bv.shape}")

        def backward(g):
            return g, _unbroadcast(g, bv.shape)

        return self._record("add", av + bv, (a, b), backward)

    def scale(self, x: Node, c: float) -> Node:
        return self._record("scale", x.value * c, (x,), lambda g: (g * c,))

    def expand(self, x: Node, axis: int, n: int) -> Node:
        """Insert a new axis of length ``n`` holding copies of ``x``."""
        value = np.repeat(np.expand_dims(x.value, axis), n, axis=axis)
        return self._record("expand", value, (x,), lambda g: (g.sum(axis=axis),))

    def reshape(self, x: Node, shape) -> Node:
        old = x.value.shape
        return self._record("reshape", x.value.reshape(shape), (x,), lambda g: (g.reshape(old),))

    def concat(self, xs: Sequence[Node], axis: int = -1) -> Node:
        vals = [x.value for x in xs]
        try:
            value = np.concatenate(vals, axis=axis)
        except ValueError as exc:
            raise ShapeError(f"concat shape mismatch: {[v.shape for v in vals]}") from exc
        splits = np.cumsum([v.shape[axis] for v in vals])[:-1]

        def backward(g):
            return tuple(np.split(g, splits, axis=axis))

        return self._record("concat", value, tuple(xs), backward)

    def relu(self, x: Node) -> Node:
        # subgradient at 0 is 0
        mask = x.value > 0
        return self._record("relu", np.where(mask, x.value, 0.0), (x,), lambda g: (g * mask,))

    def sigmoid(self, x: Node) -> Node:
        y = _sigmoid(x.value)
        return self._record("sigmoid", y, (x,), lambda g: (g * y * (1.0 - y),))

    def softmax(self, x: Node) -> Node:
        """Softmax over the last axis, with max subtraction."""
        y = softmax(x.value)

        def backward(g):
            return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

        return self._record("softmax", y, (x,), backward)

    def weighted_sum(self, w: Node, x: Node) -> Node:
        """sum_k w[..., k] * x[..., k, :]"""
        wv, xv = w.value, x.value
        if xv.shape[:-1] != wv.shape:
            raise ShapeError(f"weighted_sum shape mismatch: {wv.shape} vs {xv.shape}")
        value = (wv[..., None, :] @ xv)[..., 0, :]

        def backward(g):
            gw = (xv @ g[..., :, None])[..., 0]
            gx = wv[..., :, None] * g[..., None, :]
            return gw, gx

        return self._record("weighted_sum", value, (w, x), backward)

    def dot(self, a: Node, b: Node) -> Node:
        """Inner product over the last axis. ``b`` may be a single shared vector."""
        av, bv = a.value, b.value
        if av.shape != bv.shape and not (bv.ndim == 1 and av.shape[-1] == bv.shape[0]):
            raise ShapeError(f"dot shape mismatch: {av.shape} . {bv.shape}")
        value = (av * bv).sum(axis=-1)

        def backward(g):
            ga = g[..., None] * bv
            gb = _unbroadcast(g[..., None] * av, bv.shape)
            return ga, gb

        return self._record("dot", value, (a, b), backward)

    def l2_norm_sq(self, x: Node) -> Node:
        xv = x.value
        return self._record("l2_norm_sq", np.asarray((xv * xv).sum()), (x,), lambda g: (2.0 * g * xv,))

    def sum(self, xs: Sequence[Node]) -> Node:
        """Sum of equally shaped nodes, accumulated left to right."""
        value = xs[0].value.copy()
        for x in xs[1:]:
            if x.value.shape != value.shape:
                raise ShapeError(f"sum shape mismatch: {value.shape} vs {x.value.shape}")
            value = value + x.value
        return self._record("sum", value, tuple(xs), lambda g: tuple(g for _ in xs))

    def mean(self, x: Node) -> Node:
        n = x.value.size
        shape = x.value.shape
        return self._record("mean", np.asarray(x.value.mean()), (x,), lambda g: (np.full(shape, g / n),))

    def bce(self, p: Node, labels, eps: float = 1e-12) -> Node:
        """Mean binary cross-entropy of probabilities ``p`` with clamping to [eps, 1-eps]."""
        y = np.asarray(labels, dtype=np.float64)
        if y.shape != p.value.shape:
            raise ShapeError(f"bce shape mismatch: {p.value.shape} vs {y.shape}")
        pc = np.clip(p.value, eps, 1.0 - eps)
        inside = (p.value >= eps) & (p.value <= 1.0 - eps)
        value = np.asarray(-(y * np.log(pc) + (1.0 - y) * np.log1p(-pc)).mean())
        n = y.size

        def backward(g):
            return (g * inside * (pc - y) / (pc * (1.0 - pc)) / n,)

        return self._record("bce", value, (p,), backward)


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softmax(x: np.ndarray) -> np.ndarray:
    z = np.exp(x - x.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def sigmoid(x) -> np.ndarray:
    return _sigmoid(np.asarray(x, dtype=np.float64))


def backward(graph: ComputeGraph, loss: Node) -> dict[str, np.ndarray]:
    """Gradient of a scalar ``loss`` with respect to every parameter leaf.

    Parameters the loss does not depend on get a zero gradient.
    """
    if loss.value.shape != ():
        raise ShapeError(f"loss must be a scalar, got shape {loss.value.shape}")
    grads: dict[int, np.ndarray] = {loss.id: np.ones(())}
    for node in reversed(graph.nodes[: loss.id + 1]):
        g = grads.pop(node.id, None)
        if g is None or node._backward is None:
            if g is not None:
                grads[node.id] = g
            continue
        for parent, pg in zip(node.inputs, node._backward(g)):
            if not parent.requires_grad:
                continue
            if parent.id in grads:
                grads[parent.id] = grads[parent.id] + pg
            else:
                grads[parent.id] = pg
    return {
        name: grads.get(node.id, np.zeros_like(node.value))
        for name, node in graph.parameters.items()
    }
