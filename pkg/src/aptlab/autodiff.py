"""Define-then-run reverse-mode differentiation over dense float64 arrays.

A :class:`DiffGraph` is an append-only list of nodes.  Builder methods return
integer node ids; :meth:`DiffGraph.forward` evaluates every node in insertion
order (which is a topological order by construction) and
:meth:`DiffGraph.backward` propagates adjoints from a scalar root back to the
leaves.

Only the op-kinds needed by the attack and the prompt-tuning loops are
provided.  Broadcasting is limited to adding a 1-D bias to the rows of a
matrix and to multiplying by a scalar constant.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np

__all__ = ["DiffGraph", "GraphError", "ShapeError", "OPS"]


class GraphError(RuntimeError):
    """Misuse of a graph: backward before forward, non-scalar root, bad id."""


class ShapeError(GraphError):
    """Operand shapes incompatible with an op; names the offending node."""

    def __init__(self, node_id: int, op: str, detail: str):
        super().__init__(f"node {node_id} ({op}): {detail}")
        self.node_id = node_id
        self.op = op


# --------------------------------------------------------------------------
# op table: kind -> (forward(values, attrs), backward(gout, values, out, attrs))
# backward returns one adjoint per input (None where no gradient flows)
# --------------------------------------------------------------------------


def _same(a, b, what="operands"):
    if a.shape != b.shape:
        raise ValueError(f"{what} shapes differ: {a.shape} vs {b.shape}")


def _add_fwd(v, attrs):
    a, b = v
    if b.ndim == 1 and a.ndim == 2:
        if a.shape[1] != b.shape[0]:
            raise ValueError(f"row bias length {b.shape[0]} != {a.shape[1]}")
    else:
        _same(a, b)
    return a + b


def _add_bwd(g, v, out, attrs):
    a, b = v
    gb = g.sum(axis=0) if (b.ndim == 1 and a.ndim == 2) else g
    return [g, gb]


def _sub_fwd(v, attrs):
    _same(*v)
    return v[0] - v[1]


def _mul_fwd(v, attrs):
    _same(*v)
    return v[0] * v[1]


def _matmul_fwd(v, attrs):
    a, b = v
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"cannot matmul {a.shape} @ {b.shape}")
    return a @ b


def _scale_fwd(v, attrs):
    return v[0] * attrs["c"]


def _tanh_bwd(g, v, out, attrs):
    return [g * (1.0 - out * out)]


def _norm_fwd(v, attrs):
    (a,) = v
    if a.ndim == 1:
        return np.array(np.sqrt(a @ a))
    return np.sqrt(np.einsum("ij,ij->i", a, a))


def _norm_bwd(g, v, out, attrs):
    (a,) = v
    if a.ndim == 1:
        return [g * a / out]
    return [(g / out)[:, None] * a]


def _dot_fwd(v, attrs):
    a, b = v
    _same(a, b)
    return np.array(np.sum(a * b))


def _cos_fwd(v, attrs):
    # rows of a against rows of b -> (n_a, n_b); 1-D operands give a scalar
    a, b = v
    if a.shape[-1] != b.shape[-1]:
        raise ValueError(f"feature dims differ: {a.shape} vs {b.shape}")
    a2 = np.atleast_2d(a)
    b2 = np.atleast_2d(b)
    na = np.sqrt(np.einsum("ij,ij->i", a2, a2))
    nb = np.sqrt(np.einsum("ij,ij->i", b2, b2))
    if np.any(na == 0.0) or np.any(nb == 0.0):
        raise ValueError("cosine similarity of a zero vector is undefined")
    out = (a2 / na[:, None]) @ (b2 / nb[:, None]).T
    if a.ndim == 1 and b.ndim == 1:
        return np.array(out[0, 0])
    if a.ndim == 1:
        return out[0]
    if b.ndim == 1:
        return out[:, 0]
    return out


def _cos_bwd(g, v, out, attrs):
    a, b = v
    a2 = np.atleast_2d(a)
    b2 = np.atleast_2d(b)
    g2 = np.asarray(g).reshape(a2.shape[0], b2.shape[0])
    s = np.asarray(out).reshape(g2.shape)
    na = np.sqrt(np.einsum("ij,ij->i", a2, a2))
    nb = np.sqrt(np.einsum("ij,ij->i", b2, b2))
    ah = a2 / na[:, None]
    bh = b2 / nb[:, None]
    ga = (g2 @ bh - (g2 * s).sum(axis=1)[:, None] * ah) / na[:, None]
    gb = (g2.T @ ah - (g2 * s).sum(axis=0)[:, None] * bh) / nb[:, None]
    return [ga.reshape(a.shape), gb.reshape(b.shape)]


def _softmax_fwd(v, attrs):
    (a,) = v
    e = np.exp(a - a.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _softmax_bwd(g, v, out, attrs):
    return [out * (g - (g * out).sum(axis=-1, keepdims=True))]


def _log_fwd(v, attrs):
    (a,) = v
    if np.any(a <= 0.0):
        raise ValueError("log of a non-positive entry")
    return np.log(a)


def _nll_fwd(v, attrs):
    # mean over rows of -logp[i, y_i]
    (lp,) = v
    y = attrs["labels"]
    if lp.ndim != 2 or lp.shape[0] != y.shape[0]:
        raise ValueError(f"log-probs {lp.shape} vs {y.shape[0]} labels")
    return np.array(-lp[np.arange(y.shape[0]), y].mean())


def _nll_bwd(g, v, out, attrs):
    (lp,) = v
    y = attrs["labels"]
    ga = np.zeros_like(lp)
    ga[np.arange(y.shape[0]), y] = -g / y.shape[0]
    return [ga]


def _mean_fwd(v, attrs):
    axis = attrs["axis"]
    if axis is None:
        return np.array(v[0].mean())
    return v[0].mean(axis=axis, keepdims=attrs["keepdims"])


def _mean_bwd(g, v, out, attrs):
    (a,) = v
    axis = attrs["axis"]
    if axis is None:
        return [np.full(a.shape, g / a.size)]
    if not attrs["keepdims"]:
        g = np.expand_dims(g, axis)
    return [np.broadcast_to(g / a.shape[axis], a.shape).copy()]


def _sum_fwd(v, attrs):
    return np.array(v[0].sum())


def _concat_fwd(v, attrs):
    tails = {a.shape[1:] for a in v}
    if len(tails) != 1:
        raise ValueError(f"trailing shapes differ: {sorted(tails)}")
    return np.concatenate(v, axis=0)


def _concat_bwd(g, v, out, attrs):
    edges = np.cumsum([a.shape[0] for a in v])[:-1]
    return list(np.split(g, edges, axis=0))


def _slice_fwd(v, attrs):
    (a,) = v
    key = attrs["key"]
    n = a.shape[0]
    if isinstance(key, int) and not -n <= key < n:
        raise ValueError(f"index {key} out of range for length {n}")
    return np.array(a[key])


def _slice_bwd(g, v, out, attrs):
    ga = np.zeros_like(v[0])
    ga[attrs["key"]] += g
    return [ga]


def _clamp_fwd(v, attrs):
    return np.clip(v[0], attrs["lo"], attrs["hi"])


def _clamp_bwd(g, v, out, attrs):
    a = v[0]
    inside = (a >= attrs["lo"]) & (a <= attrs["hi"])
    return [np.where(inside, g, 0.0)]


def _tap_fwd(v, attrs):
    if attrs.get("on_forward") is not None:
        attrs["on_forward"]()
    return v[0]


def _tap_bwd(g, v, out, attrs):
    if attrs.get("on_backward") is not None:
        attrs["on_backward"]()
    return [g]


@dataclass(frozen=True)
class OpKind:
    forward: Callable[[list, dict], np.ndarray]
    backward: Callable[[np.ndarray, list, np.ndarray, dict], list]
    arity: int | None  # None: variadic


OPS: dict[str, OpKind] = {
    "add": OpKind(_add_fwd, _add_bwd, 2),
    "sub": OpKind(_sub_fwd, lambda g, v, o, at: [g, -g], 2),
    "mul": OpKind(_mul_fwd, lambda g, v, o, at: [g * v[1], g * v[0]], 2),
    "matmul": OpKind(_matmul_fwd, lambda g, v, o, at: [g @ v[1].T, v[0].T @ g], 2),
    "scale": OpKind(_scale_fwd, lambda g, v, o, at: [g * at["c"]], 1),
    "tanh": OpKind(lambda v, at: np.tanh(v[0]), _tanh_bwd, 1),
    "norm": OpKind(_norm_fwd, _norm_bwd, 1),
    "dot": OpKind(_dot_fwd, lambda g, v, o, at: [g * v[1], g * v[0]], 2),
    "cosine": OpKind(_cos_fwd, _cos_bwd, 2),
    "softmax": OpKind(_softmax_fwd, _softmax_bwd, 1),
    "log": OpKind(_log_fwd, lambda g, v, o, at: [g / v[0]], 1),
    "nll": OpKind(_nll_fwd, _nll_bwd, 1),
    "mean": OpKind(_mean_fwd, _mean_bwd, 1),
    "sum": OpKind(_sum_fwd, lambda g, v, o, at: [np.full(v[0].shape, float(g))], 1),
    "concat": OpKind(_concat_fwd, _concat_bwd, None),
    "slice": OpKind(_slice_fwd, _slice_bwd, 1),
    "clamp": OpKind(_clamp_fwd, _clamp_bwd, 1),
    # gradient of sign is defined as zero everywhere
    "sign": OpKind(lambda v, at: np.sign(v[0]), lambda g, v, o, at: [np.zeros_like(v[0])], 1),
    "tap": OpKind(_tap_fwd, _tap_bwd, 1),
}


@dataclass(eq=False)
class Node:
    op: str  # "leaf" for inputs
    inputs: tuple[int, ...]
    attrs: dict[str, Any] = field(default_factory=dict)
    value: np.ndarray | None = None
    grad: np.ndarray | None = None
    requires_grad: bool = False


class DiffGraph:
    """Computation graph built by method calls, evaluated by :meth:`forward`.

    >>> g = DiffGraph()
    >>> x = g.leaf(3.0, requires_grad=True)
    >>> y = g.mul(x, x)
    >>> float(g.forward(y)), float(g.backward(y)[x])
    (9.0, 6.0)
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self._evaluated = 0  # number of leading nodes with a fresh value
        self._backward_done = False

    # ---- construction -------------------------------------------------

    def leaf(self, value, requires_grad: bool = False, name: str | None = None) -> int:
        arr = np.array(value, dtype=np.float64)
        node = Node("leaf", (), {"name": name}, value=arr, requires_grad=requires_grad)
        self.nodes.append(node)
        return len(self.nodes) - 1

    def op(self, kind: str, *inputs: int, **attrs) -> int:
        spec = OPS.get(kind)
        if spec is None:
            raise GraphError(f"unknown op-kind {kind!r}")
        if spec.arity is not None and len(inputs) != spec.arity:
            raise GraphError(f"{kind} takes {spec.arity} inputs, got {len(inputs)}")
        if kind == "concat" and not inputs:
            raise GraphError("concat needs at least one input")
        for i in inputs:
            if not 0 <= i < len(self.nodes):
                raise GraphError(f"input id {i} does not precede the new node")
        rg = kind != "sign" and any(self.nodes[i].requires_grad for i in inputs)
        self.nodes.append(Node(kind, tuple(inputs), attrs, requires_grad=rg))
        return len(self.nodes) - 1

    def add(self, a, b):
        return self.op("add", a, b)

    def sub(self, a, b):
        return self.op("sub", a, b)

    def mul(self, a, b):
        return self.op("mul", a, b)

    def matmul(self, a, b):
        return self.op("matmul", a, b)

    def scale(self, a, c: float):
        return self.op("scale", a, c=float(c))

    def tanh(self, a):
        return self.op("tanh", a)

    def norm(self, a):
        return self.op("norm", a)

    def dot(self, a, b):
        return self.op("dot", a, b)

    def cosine(self, a, b):
        return self.op("cosine", a, b)

    def softmax(self, a):
        return self.op("softmax", a)

    def log(self, a):
        return self.op("log", a)

    def nll(self, logp, labels):
        return self.op("nll", logp, labels=np.asarray(labels, dtype=np.intp))

    def mean(self, a, axis: int | None = None, keepdims: bool = False):
        return self.op("mean", a, axis=axis, keepdims=keepdims)

    def sum(self, a):
        return self.op("sum", a)

    def concat(self, *parts):
        return self.op("concat", *parts)

    def slice(self, a, key):
        return self.op("slice", a, key=key)

    def clamp(self, a, lo: float, hi: float):
        return self.op("clamp", a, lo=float(lo), hi=float(hi))

    def sign(self, a):
        return self.op("sign", a)

    def tap(self, a, on_forward=None, on_backward=None):
        """Identity node whose callbacks fire when values or adjoints pass."""
        return self.op("tap", a, on_forward=on_forward, on_backward=on_backward)

    def cross_entropy(self, logits, labels):
        """Mean negative log-likelihood of ``softmax(logits)`` at ``labels``."""
        return self.nll(self.log(self.softmax(logits)), labels)

    # ---- evaluation ---------------------------------------------------

    def set_value(self, node_id: int, value) -> None:
        """Replace a leaf value; downstream values become stale."""
        node = self.nodes[node_id]
        if node.op != "leaf":
            raise GraphError(f"node {node_id} is not a leaf")
        arr = np.array(value, dtype=np.float64)
        if arr.shape != node.value.shape:
            raise ShapeError(node_id, "leaf", f"new shape {arr.shape} != {node.value.shape}")
        node.value = arr
        self._evaluated = min(self._evaluated, node_id)

    def forward(self, root: int | None = None) -> np.ndarray:
        """Evaluate all nodes; return the value of ``root`` (default: last)."""
        for i in range(self._evaluated, len(self.nodes)):
            node = self.nodes[i]
            node.grad = None
            if node.op == "leaf":
                continue
            spec = OPS[node.op]
            vals = [self.nodes[j].value for j in node.inputs]
            try:
                out = spec.forward(vals, node.attrs)
            except ValueError as exc:
                raise ShapeError(i, node.op, str(exc)) from None
            node.value = np.asarray(out, dtype=np.float64)
        for node in self.nodes:
            node.grad = None
        self._evaluated = len(self.nodes)
        self._backward_done = False
        return self.value(len(self.nodes) - 1 if root is None else root)

    def value(self, node_id: int) -> np.ndarray:
        node = self.nodes[node_id]
        if node.value is None:
            raise GraphError(f"node {node_id} has no value; run forward first")
        return node.value

    def backward(self, root: int) -> dict[int, np.ndarray]:
        """Accumulate d(root)/d(node) into every node that requires grad.

        Returns a mapping from leaf id to gradient for every leaf created with
        ``requires_grad=True``.  Gradient buffers start at zero on each call.
        """
        if self._evaluated < len(self.nodes) or self.nodes[root].value is None:
            raise GraphError("backward called before forward")
        out = self.nodes[root].value
        if out.size != 1:
            raise GraphError(f"root {root} is not scalar (shape {out.shape})")
        for node in self.nodes:
            node.grad = np.zeros_like(node.value) if node.requires_grad else None
        if not self.nodes[root].requires_grad:
            return {}
        self.nodes[root].grad = np.ones_like(out)
        for i in range(root, -1, -1):
            node = self.nodes[i]
            if node.op == "leaf" or not node.requires_grad:
                continue
            vals = [self.nodes[j].value for j in node.inputs]
            grads = OPS[node.op].backward(node.grad, vals, node.value, node.attrs)
            for j, gj in zip(node.inputs, grads):
                dst = self.nodes[j]
                if dst.requires_grad and gj is not None:
                    dst.grad += gj
        self._backward_done = True
        return {
            i: n.grad for i, n in enumerate(self.nodes) if n.op == "leaf" and n.requires_grad
        }

    def grad(self, node_id: int) -> np.ndarray:
        if not self._backward_done:
            raise GraphError("no backward pass has run")
        g = self.nodes[node_id].grad
        return np.zeros_like(self.nodes[node_id].value) if g is None else g

    def __len__(self):
        return len(self.nodes)
