"""Static compute graphs over float64 numpy arrays with reverse-mode autodiff.

A :class:`Graph` is built once (inputs, parameters, ops) and then executed any
number of times with :meth:`Graph.forward`.  :meth:`Graph.backward` walks the
recorded nodes in reverse and returns gradients for every trainable parameter
and every input declared with ``requires_grad=True``.

Supported ops: ``matmul``, ``add`` (same shape, or a bias row broadcast over the
leading batch dim), ``relu``, ``tanh``, ``scale`` (multiply by a constant),
``concat`` (last axis), ``mean`` (over the leading batch dim) and the fused
``softmax_xent`` returning per-sample losses.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

DTYPE = np.float64


class GraphError(RuntimeError):
    """Misuse of a graph: backward before forward, non-scalar loss, unbound input."""


class ShapeError(ValueError):
    """Incompatible operand shapes at a graph node."""

    def __init__(self, node_id: int, op: str, shapes: tuple, detail: str = ""):
        self.node_id = node_id
        self.op = op
        self.shapes = shapes
        msg = f"node {node_id} ({op}): incompatible shapes {shapes}"
        if detail:
            msg += f"; {detail}"
        super().__init__(msg)


def as_tensor(value) -> np.ndarray:
    arr = np.array(value, dtype=DTYPE)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    if not np.all(np.isfinite(arr)):
        raise ValueError("tensor contains non-finite values")
    return arr


@dataclass
class Node:
    id: int
    op: str
    inputs: tuple[int, ...]
    name: str | None = None
    trainable: bool = False
    requires_grad: bool = False
    attrs: dict = field(default_factory=dict)


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


class Graph:
    """A topologically ordered list of op nodes.

    Nodes are appended in construction order, so every node's inputs precede it
    and the graph is acyclic by construction.
    """

    def __init__(self) -> None:
        self.nodes: list[Node] = []
        self.params: dict[str, np.ndarray] = {}
        self.outputs: dict[str, int] = {}
        self._names: dict[str, int] = {}
        self._values: list[np.ndarray | None] | None = None
        self.forward_count = 0
        self.backward_count = 0

    # -- construction -------------------------------------------------------

    def _add(self, op: str, inputs: tuple[int, ...], **kw) -> int:
        for i in inputs:
            if not 0 <= i < len(self.nodes):
                raise GraphError(f"op {op}: unknown input node {i}")
        node = Node(id=len(self.nodes), op=op, inputs=inputs, **kw)
        node.requires_grad = node.requires_grad or node.trainable or any(
            self.nodes[i].requires_grad for i in inputs
        )
        self.nodes.append(node)
        return node.id

    def _register(self, name: str, node_id: int) -> None:
        if name in self._names:
            raise GraphError(f"duplicate name {name!r}")
        self._names[name] = node_id

    def input(self, name: str, requires_grad: bool = False, dtype=DTYPE) -> int:
        nid = self._add("input", (), name=name, requires_grad=requires_grad, attrs={"dtype": dtype})
        self._register(name, nid)
        return nid

    def param(self, name: str, value, trainable: bool = True) -> int:
        nid = self._add("param", (), name=name, trainable=trainable)
        self._register(name, nid)
        self.params[name] = as_tensor(value)
        return nid

    def set_param(self, name: str, value) -> None:
        old = self.params[name]
        new = np.array(value, dtype=DTYPE)
        if new.shape != old.shape:
            raise ShapeError(self._names[name], "param", (old.shape, new.shape), f"rebinding {name!r}")
        self.params[name] = new
        self._values = None

    def matmul(self, a: int, b: int) -> int:
        return self._add("matmul", (a, b))

    def add(self, a: int, b: int) -> int:
        return self._add("add", (a, b))

    def relu(self, a: int) -> int:
        return self._add("relu", (a,))

    def tanh(self, a: int) -> int:
        return self._add("tanh", (a,))

    def scale(self, a: int, c: float) -> int:
        return self._add("scale", (a,), attrs={"c": float(c)})

    def concat(self, a: int, b: int) -> int:
        return self._add("concat", (a, b))

    def mean(self, a: int) -> int:
        return self._add("mean", (a,))

    def softmax_xent(self, logits: int, labels: int) -> int:
        """Per-sample cross-entropy of ``logits`` [B, C] against integer ``labels`` [B]."""
        return self._add("softmax_xent", (logits, labels))

    def output(self, name: str, node: int) -> None:
        self.outputs[name] = node

    def node_id(self, name: str) -> int:
        return self._names[name]

    @property
    def trainable_names(self) -> list[str]:
        return [n.name for n in self.nodes if n.op == "param" and n.trainable]

    # -- execution ----------------------------------------------------------

    def forward(self, inputs: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        values: list[np.ndarray | None] = [None] * len(self.nodes)
        for node in self.nodes:
            values[node.id] = self._eval(node, values, inputs)
        self._values = values
        self.forward_count += 1
        return {name: values[nid] for name, nid in self.outputs.items()}

    def value(self, node: int) -> np.ndarray:
        if self._values is None:
            raise GraphError("forward has not been executed")
        return self._values[node]

    def _eval(self, node: Node, values, inputs) -> np.ndarray:
        op = node.op
        if op == "input":
            if node.name not in inputs:
                raise GraphError(f"input {node.name!r} not bound")
            dtype = node.attrs["dtype"]
            arr = np.asarray(inputs[node.name], dtype=dtype)
            return arr
        if op == "param":
            return self.params[node.name]
        args = [values[i] for i in node.inputs]
        shapes = tuple(a.shape for a in args)
        if op == "matmul":
            a, b = args
            if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
                raise ShapeError(node.id, op, shapes, "inner dimensions must match")
            return a @ b
        if op == "add":
            a, b = args
            if a.shape == b.shape:
                return a + b
            if b.ndim == 1 and a.ndim == 2 and a.shape[1] == b.shape[0]:
                return a + b
            raise ShapeError(node.id, op, shapes, "broadcast allowed only over the leading batch dim")
        if op == "relu":
            return np.maximum(args[0], 0.0)
        if op == "tanh":
            return np.tanh(args[0])
        if op == "scale":
            return args[0] * node.attrs["c"]
        if op == "concat":
            a, b = args
            if a.ndim != 2 or b.ndim != 2 or a.shape[0] != b.shape[0]:
                raise ShapeError(node.id, op, shapes, "batch dims must match")
            return np.concatenate([a, b], axis=1)
        if op == "mean":
            a = args[0]
            return a.mean(axis=0)
        if op == "softmax_xent":
            logits, labels = args
            if logits.ndim != 2 or labels.shape != (logits.shape[0],):
                raise ShapeError(node.id, op, shapes, "expected logits [B, C] and labels [B]")
            labels = labels.astype(np.int64)
            if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
                raise ValueError(f"node {node.id} (softmax_xent): label outside [0, {logits.shape[1]})")
            shifted = logits - logits.max(axis=1, keepdims=True)
            logz = np.log(np.exp(shifted).sum(axis=1))
            return logz - shifted[np.arange(len(labels)), labels]
        raise GraphError(f"unknown op {op!r}")

    def backward(self, node: int, grad_output: np.ndarray | None = None) -> dict[str, np.ndarray]:
        """Reverse-mode sweep from ``node``.

        With ``grad_output=None`` the node must be a scalar (size-1) loss.
        Otherwise ``grad_output`` is the upstream gradient, same shape as the
        node's value.  Returns gradients keyed by parameter/input name.
        """
        if self._values is None:
            raise GraphError("backward called before forward")
        out_val = self._values[node]
        if grad_output is None:
            if out_val.size != 1:
                raise GraphError(f"loss node {node} is not scalar (shape {out_val.shape})")
            seed = np.ones_like(out_val)
        else:
            seed = np.asarray(grad_output, dtype=DTYPE)
            if seed.shape != out_val.shape:
                raise ShapeError(node, "backward", (out_val.shape, seed.shape), "upstream gradient shape")
        grads: list[np.ndarray | None] = [None] * len(self.nodes)
        grads[node] = seed
        for n in reversed(self.nodes[: node + 1]):
            g = grads[n.id]
            if g is None or not n.requires_grad or not n.inputs:
                continue
            for i, gi in zip(n.inputs, self._vjp(n, g)):
                if gi is None or not self.nodes[i].requires_grad:
                    continue
                grads[i] = gi if grads[i] is None else grads[i] + gi
        self.backward_count += 1
        result = {}
        for n in self.nodes:
            if (n.op == "param" and n.trainable) or (n.op == "input" and n.requires_grad):
                g = grads[n.id]
                result[n.name] = np.zeros_like(self._values[n.id], dtype=DTYPE) if g is None else g
        return result

    def _vjp(self, node: Node, g: np.ndarray) -> list[np.ndarray | None]:
        args = [self._values[i] for i in node.inputs]
        op = node.op
        if op == "matmul":
            a, b = args
            return [g @ b.T, a.T @ g]
        if op == "add":
            a, b = args
            gb = g if b.shape == g.shape else g.sum(axis=0)
            return [g, gb]
        if op == "relu":
            return [g * (args[0] > 0)]
        if op == "tanh":
            y = self._values[node.id]
            return [g * (1.0 - y * y)]
        if op == "scale":
            return [g * node.attrs["c"]]
        if op == "concat":
            k = args[0].shape[1]
            return [g[:, :k], g[:, k:]]
        if op == "mean":
            a = args[0]
            return [np.broadcast_to(g / a.shape[0], a.shape).copy()]
        if op == "softmax_xent":
            logits, labels = args
            p = _softmax(logits)
            p[np.arange(len(labels)), labels.astype(np.int64)] -= 1.0
            return [p * g[:, None], None]
        raise GraphError(f"no gradient rule for op {op!r}")


def graph_forward(graph: Graph, inputs: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return graph.forward(inputs)


def graph_backward(graph: Graph, loss_node: int) -> dict[str, np.ndarray]:
    return graph.backward(loss_node)


def finite_difference_gradient(
    graph: Graph,
    inputs: dict[str, np.ndarray],
    loss_node: int,
    h: float = 1e-5,
    names: list[str] | None = None,
) -> dict[str, np.ndarray]:
    """Central differences ``(L(p + h) - L(p - h)) / 2h`` for every coordinate.

    ``names`` defaults to all trainable parameters.  Inputs listed in ``names``
    are perturbed too, which is how boundary gradients are checked.  Parameter
    values are restored afterwards.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    names = graph.trainable_names if names is None else names
    inputs = dict(inputs)

    def loss_at() -> float:
        graph.forward(inputs)
        val = graph.value(loss_node)
        if val.size != 1:
            raise GraphError(f"loss node {loss_node} is not scalar")
        return float(val.reshape(-1)[0])

    out = {}
    for name in names:
        if name in graph.params:
            base = graph.params[name]
            setter: Callable[[np.ndarray], None] = lambda v, n=name: graph.set_param(n, v)
        else:
            base = np.asarray(inputs[name], dtype=DTYPE)
            setter = lambda v, n=name: inputs.__setitem__(n, v)
        base = base.copy()
        grad = np.zeros_like(base)
        flat = grad.reshape(-1)
        for i in range(base.size):
            plus = base.copy()
            plus.reshape(-1)[i] += h
            setter(plus)
            lp = loss_at()
            minus = base.copy()
            minus.reshape(-1)[i] -= h
            setter(minus)
            lm = loss_at()
            flat[i] = (lp - lm) / (2.0 * h)
        setter(base)
        out[name] = grad
    graph.forward(inputs)
    return out


def relative_error(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Per-coordinate ``|a - b| / max(|a|, |b|, 1e-8)``."""
    a = np.asarray(a, dtype=DTYPE)
    b = np.asarray(b, dtype=DTYPE)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)
