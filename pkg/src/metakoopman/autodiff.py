"""Tape-based reverse-mode automatic differentiation over numpy arrays.

A :class:`Graph` is an append-only list of nodes. Every op appends one node
holding its forward value and a closure mapping the upstream gradient to
gradients for its inputs. Node ids are plain ints; inputs always have
smaller ids than the node that consumes them, so ``backward`` can sweep the
list once in decreasing order.

Operands follow numpy broadcasting; backward rules sum the gradient back to
each operand's shape.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

NodeId = int


class ShapeError(ValueError):
    pass


class _Node:
    __slots__ = ("op", "inputs", "value", "grad_fn", "extra")

    def __init__(self, op, inputs, value, grad_fn=None, extra=None):
        self.op = op
        self.inputs = inputs
        self.value = value
        self.grad_fn = grad_fn
        self.extra = extra


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff > 0:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_finite(op: str, value: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(value)):
        raise FloatingPointError(f"{op}: produced non-finite values")
    return value


class Graph:
    """Records ops for one forward/backward pass.

    ``training`` switches dropout on; ``rng`` supplies the dropout masks.
    Parameters are registered by name with :meth:`param` so that repeated
    use of the same weight maps onto a single leaf.
    """

    def __init__(self, training: bool = False, rng: np.random.Generator | None = None):
        self.nodes: list[_Node] = []
        self.training = training
        self.rng = rng
        self.params: dict[str, NodeId] = {}

    def __len__(self) -> int:
        return len(self.nodes)

    def value(self, node: NodeId) -> np.ndarray:
        return self.nodes[node].value

    def shape(self, node: NodeId) -> tuple:
        return self.nodes[node].value.shape

    def _push(self, op, inputs, value, grad_fn=None, extra=None) -> NodeId:
        _check_finite(op, value)
        self.nodes.append(_Node(op, tuple(inputs), value, grad_fn, extra))
        return len(self.nodes) - 1

    # ------------------------------------------------------------------ leaves

    def constant(self, value) -> NodeId:
        return self._push("const", (), np.asarray(value, dtype=np.float64))

    def param(self, name: str, value: np.ndarray) -> NodeId:
        if name in self.params:
            return self.params[name]
        node = self._push("param", (), np.asarray(value, dtype=np.float64))
        self.params[name] = node
        return node

    # ------------------------------------------------------------ arithmetic

    def matmul(self, a: NodeId, b: NodeId) -> NodeId:
        va, vb = self.value(a), self.value(b)
        if va.ndim < 2 or vb.ndim < 2 or va.shape[-1] != vb.shape[-2]:
            raise ShapeError(f"matmul: incompatible shapes {va.shape} and {vb.shape}")
        try:
            out = np.matmul(va, vb)
        except ValueError as exc:
            raise ShapeError(f"matmul: incompatible shapes {va.shape} and {vb.shape}") from exc

        def grad_fn(g):
            ga = np.matmul(g, np.swapaxes(vb, -1, -2))
            gb = np.matmul(np.swapaxes(va, -1, -2), g)
            return _unbroadcast(ga, va.shape), _unbroadcast(gb, vb.shape)

        return self._push("matmul", (a, b), out, grad_fn)

    def _binary(self, op: str, a: NodeId, b: NodeId, fwd, grads) -> NodeId:
        va, vb = self.value(a), self.value(b)
        try:
            out = fwd(va, vb)
        except ValueError as exc:
            raise ShapeError(f"{op}: incompatible shapes {va.shape} and {vb.shape}") from exc

        def grad_fn(g):
            ga, gb = grads(g, va, vb)
            return _unbroadcast(ga, va.shape), _unbroadcast(gb, vb.shape)

        return self._push(op, (a, b), out, grad_fn)

    def add(self, a: NodeId, b: NodeId) -> NodeId:
        return self._binary("add", a, b, np.add, lambda g, x, y: (g, g))

    def sub(self, a: NodeId, b: NodeId) -> NodeId:
        return self._binary("sub", a, b, np.subtract, lambda g, x, y: (g, -g))

    def mul(self, a: NodeId, b: NodeId) -> NodeId:
        return self._binary("mul", a, b, np.multiply, lambda g, x, y: (g * y, g * x))

    def scale(self, a: NodeId, c: float) -> NodeId:
        c = float(c)
        return self._push("scale", (a,), self.value(a) * c, lambda g: (g * c,))

    # ----------------------------------------------------------- nonlinearity

    def relu(self, a: NodeId) -> NodeId:
        va = self.value(a)
        mask = va > 0
        return self._push("relu", (a,), np.where(mask, va, 0.0), lambda g: (g * mask,))

    def sigmoid(self, a: NodeId) -> NodeId:
        va = self.value(a)
        out = 0.5 * (1.0 + np.tanh(0.5 * va))
        return self._push("sigmoid", (a,), out, lambda g: (g * out * (1.0 - out),))

    def tanh(self, a: NodeId) -> NodeId:
        out = np.tanh(self.value(a))
        return self._push("tanh", (a,), out, lambda g: (g * (1.0 - out * out),))

    def dropout(self, a: NodeId, rate: float) -> NodeId:
        """Inverted dropout; identity outside training mode or at rate 0."""
        if not self.training or rate <= 0.0:
            return a
        if self.rng is None:
            raise ValueError("dropout: training graph needs an rng")
        va = self.value(a)
        mask = (self.rng.random(va.shape) >= rate) / (1.0 - rate)
        return self._push("dropout", (a,), va * mask, lambda g: (g * mask,), extra=mask)

    # ------------------------------------------------------------- reductions

    def sum(self, a: NodeId) -> NodeId:
        va = self.value(a)
        return self._push("sum", (a,), np.asarray(va.sum()), lambda g: (np.full(va.shape, float(g)),))

    def mean(self, a: NodeId, axis: int) -> NodeId:
        va = self.value(a)
        axis = axis % va.ndim
        n = va.shape[axis]

        def grad_fn(g):
            return (np.broadcast_to(np.expand_dims(g, axis), va.shape) / n,)

        return self._push("mean", (a,), va.mean(axis=axis), grad_fn)

    def sq_error(self, pred: NodeId, target: NodeId, scale: float | None = None) -> NodeId:
        """``scale * sum((pred - target)**2)``; ``scale`` defaults to 1/n (mean)."""
        vp, vt = self.value(pred), self.value(target)
        if vp.shape != vt.shape:
            raise ShapeError(f"sq_error: incompatible shapes {vp.shape} and {vt.shape}")
        c = 1.0 / vp.size if scale is None else float(scale)
        diff = vp - vt
        out = np.asarray(c * np.sum(diff * diff))

        def grad_fn(g):
            gp = (2.0 * c * float(g)) * diff
            return gp, -gp

        return self._push("sq_error", (pred, target), out, grad_fn)

    # --------------------------------------------------------------- structure

    def concat(self, parts: Sequence[NodeId], axis: int = -1) -> NodeId:
        vals = [self.value(p) for p in parts]
        try:
            out = np.concatenate(vals, axis=axis)
        except ValueError as exc:
            shapes = " and ".join(str(v.shape) for v in vals)
            raise ShapeError(f"concat: incompatible shapes {shapes}") from exc
        bounds = np.cumsum([v.shape[axis] for v in vals])[:-1]

        def grad_fn(g):
            return tuple(np.split(g, bounds, axis=axis))

        return self._push("concat", tuple(parts), out, grad_fn)

    def stack(self, parts: Sequence[NodeId], axis: int = 0) -> NodeId:
        vals = [self.value(p) for p in parts]
        try:
            out = np.stack(vals, axis=axis)
        except ValueError as exc:
            shapes = " and ".join(str(v.shape) for v in vals)
            raise ShapeError(f"stack: incompatible shapes {shapes}") from exc
        ax = axis % out.ndim

        def grad_fn(g):
            return tuple(np.take(g, i, axis=ax) for i in range(len(vals)))

        return self._push("stack", tuple(parts), out, grad_fn)

    def slice(self, a: NodeId, axis: int, start: int, stop: int) -> NodeId:
        va = self.value(a)
        axis = axis % va.ndim
        if not 0 <= start < stop <= va.shape[axis]:
            raise ShapeError(f"slice: range [{start}, {stop}) out of bounds for axis {axis} of {va.shape}")
        idx = (slice(None),) * axis + (slice(start, stop),)

        def grad_fn(g):
            full = np.zeros(va.shape)
            full[idx] = g
            return (full,)

        return self._push("slice", (a,), va[idx], grad_fn)

    def take(self, a: NodeId, axis: int, index: int) -> NodeId:
        """Select one position along ``axis``, dropping that axis."""
        va = self.value(a)
        axis = axis % va.ndim
        if not 0 <= index < va.shape[axis]:
            raise ShapeError(f"take: index {index} out of bounds for axis {axis} of {va.shape}")
        idx = (slice(None),) * axis + (index,)

        def grad_fn(g):
            full = np.zeros(va.shape)
            full[idx] = g
            return (full,)

        return self._push("take", (a,), va[idx], grad_fn)

    def reshape(self, a: NodeId, shape: tuple) -> NodeId:
        va = self.value(a)
        try:
            out = va.reshape(shape)
        except ValueError as exc:
            raise ShapeError(f"reshape: cannot reshape {va.shape} to {shape}") from exc
        return self._push("reshape", (a,), out, lambda g: (g.reshape(va.shape),))

    def transpose(self, a: NodeId) -> NodeId:
        """Swap the last two axes."""
        va = self.value(a)
        if va.ndim < 2:
            raise ShapeError(f"transpose: need at least 2 axes, got {va.shape}")
        return self._push("transpose", (a,), np.swapaxes(va, -1, -2), lambda g: (np.swapaxes(g, -1, -2),))

    def broadcast_to(self, a: NodeId, shape: tuple) -> NodeId:
        va = self.value(a)
        try:
            out = np.broadcast_to(va, shape)
        except ValueError as exc:
            raise ShapeError(f"broadcast_to: cannot broadcast {va.shape} to {shape}") from exc
        return self._push("broadcast_to", (a,), out, lambda g: (_unbroadcast(g, va.shape),))

    def inv(self, a: NodeId) -> NodeId:
        va = self.value(a)
        if va.ndim < 2 or va.shape[-1] != va.shape[-2]:
            raise ShapeError(f"inv: expected square matrices, got {va.shape}")
        out = np.linalg.inv(va)

        def grad_fn(g):
            ot = np.swapaxes(out, -1, -2)
            return (-(ot @ g @ ot),)

        return self._push("inv", (a,), out, grad_fn)

    def custom(self, op: str, inputs: Sequence[NodeId], value: np.ndarray,
               grad_fn: Callable[[np.ndarray], tuple]) -> NodeId:
        """Append an op whose forward value and backward rule are computed elsewhere."""
        return self._push(op, tuple(inputs), np.asarray(value, dtype=np.float64), grad_fn)

    # ---------------------------------------------------------------- backward

    def backward(self, loss: NodeId) -> list:
        """Gradient of scalar ``loss`` w.r.t. every node (``None`` where unreachable)."""
        lv = self.value(loss)
        if lv.size != 1:
            raise ShapeError(f"backward: loss must be scalar, got shape {lv.shape}")
        grads: list = [None] * len(self.nodes)
        grads[loss] = np.ones(lv.shape)
        for i in range(loss, -1, -1):
            g = grads[i]
            node = self.nodes[i]
            if g is None or node.grad_fn is None:
                continue
            for inp, gi in zip(node.inputs, node.grad_fn(g)):
                if grads[inp] is None:
                    grads[inp] = gi
                else:
                    grads[inp] = grads[inp] + gi
        return grads

    def param_grads(self, loss: NodeId) -> dict[str, np.ndarray]:
        """Gradients keyed by parameter name; unused parameters get zeros."""
        grads = self.backward(loss)
        out = {}
        for name, node in self.params.items():
            g = grads[node]
            out[name] = np.zeros(self.shape(node)) if g is None else np.array(g, dtype=np.float64)
        return out
