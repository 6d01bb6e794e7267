"""Taped reverse-mode differentiation over float64 numpy arrays.

A :class:`Graph` is an append-only tape. Every op appends one :class:`Node`
holding its forward value, its parent nodes and a vector-Jacobian closure, so
the tape order is already a topological order. :func:`backward` walks it once
in reverse.

Tensors are plain ``numpy.ndarray`` objects of dtype float64; shape metadata is
the array's own ``shape``. A graph may be built in ``np.longdouble`` instead,
which the finite-difference oracle uses to push its cancellation noise below
the f64 gradients it is checked against.
"""

from __future__ import annotations

from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, DimensionError

LAYER_NORM_EPS = 1e-5

Vjp = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Node:
    __slots__ = ("graph", "index", "value", "parents", "vjp", "name", "op")

    def __init__(self, graph: "Graph", value: np.ndarray, parents: Tuple["Node", ...],
                 vjp: Optional[Vjp], name: Optional[str], op: str):
        self.graph = graph
        self.index = len(graph.nodes)
        self.value = value
        self.parents = parents
        self.vjp = vjp
        self.name = name
        self.op = op

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"<Node #{self.index} {self.op}{label} shape={self.shape}>"


class Graph:
    """Tape of recorded ops plus the named trainable leaves."""

    def __init__(self, dtype=np.float64) -> None:
        self.nodes: List[Node] = []
        self.params: Dict[str, Node] = {}
        self.dtype = np.dtype(dtype)

    def constant(self, value, name: Optional[str] = None) -> Node:
        return self._append(np.array(value, dtype=self.dtype), (), None, name, "constant")

    def param(self, name: str, value) -> Node:
        """Return the trainable leaf called ``name``, creating it on first use."""
        if name in self.params:
            return self.params[name]
        node = self._append(np.array(value, dtype=self.dtype), (), None, name, "param")
        self.params[name] = node
        return node

    def record(self, op: str, value: np.ndarray, parents: Sequence[Node], vjp: Vjp) -> Node:
        """Append a new op node. ``vjp`` maps the output cotangent to one cotangent per parent."""
        for p in parents:
            if p.graph is not self:
                raise ContractError(f"{op}: operand {p!r} belongs to a different graph")
        return self._append(value, tuple(parents), vjp, None, op)

    def _append(self, value, parents, vjp, name, op) -> Node:
        node = Node(self, value, parents, vjp, name, op)
        self.nodes.append(node)
        return node


def backward(graph: Graph, loss: Node) -> Dict[str, np.ndarray]:
    """Gradient of scalar ``loss`` with respect to every named parameter.

    Parameters that the loss does not depend on get a zero gradient.
    """
    if loss.graph is not graph:
        raise ContractError("loss node is not on this graph")
    if loss.value.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")

    grads: Dict[int, np.ndarray] = {loss.index: np.ones_like(loss.value)}
    for node in reversed(graph.nodes[: loss.index + 1]):
        g = grads.pop(node.index, None) if node.vjp is not None else grads.get(node.index)
        if g is None or node.vjp is None:
            continue
        for parent, pg in zip(node.parents, node.vjp(g)):
            if pg is None:
                continue
            if pg.shape != parent.shape:
                raise ContractError(
                    f"{node.op}: backward produced shape {pg.shape} for operand of shape {parent.shape}")
            # BLAS reduction order depends on memory layout; keep gradients
            # C-ordered so equal values always give bit-equal results downstream
            if not pg.flags.c_contiguous:
                pg = pg.copy(order="C")
            if parent.index in grads:
                grads[parent.index] = grads[parent.index] + pg
            else:
                grads[parent.index] = pg
    return {name: grads.get(n.index, np.zeros_like(n.value)) for name, n in graph.params.items()}


# ----------------------------------------------------------------------------
# ops
# ----------------------------------------------------------------------------

def matmul(a: Node, b: Node) -> Node:
    A, B = a.value, b.value
    if A.ndim != 2 or B.ndim != 2 or A.shape[1] != B.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {A.shape} by {B.shape}")

    def vjp(g):
        return g @ B.T, A.T @ g

    return a.graph.record("matmul", A @ B, (a, b), vjp)


def softmax_rows(x: Node) -> Node:
    X = x.value
    if X.ndim != 2:
        raise DimensionError(f"softmax_rows: expected a matrix, got shape {X.shape}")
    Y = _softmax(X)

    def vjp(g):
        return (Y * (g - np.sum(g * Y, axis=1, keepdims=True)),)

    return x.graph.record("softmax_rows", Y, (x,), vjp)


def _softmax(X: np.ndarray) -> np.ndarray:
    e = np.exp(X - X.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def conv_output_size(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def conv2d(x: Node, k: Node, stride: int = 1, pad: int = 0, bias: Optional[Node] = None) -> Node:
    """Cross-correlation of one ``[Cin, H, W]`` image with ``[Cout, Cin, kh, kw]`` kernels.

    Zero padding only. ``bias`` is an optional ``[Cout]`` vector added per output channel.
    """
    X, K = x.value, k.value
    if X.ndim != 3 or K.ndim != 4 or X.shape[0] != K.shape[1]:
        raise DimensionError(f"conv2d: input {X.shape} does not match kernel {K.shape}")
    if stride < 1 or pad < 0:
        raise ContractError(f"conv2d: need stride >= 1 and pad >= 0, got stride={stride} pad={pad}")
    cin, h, w = X.shape
    cout, _, kh, kw = K.shape
    if kh > h + 2 * pad or kw > w + 2 * pad:
        raise DimensionError(f"conv2d: kernel {kh}x{kw} larger than padded input {h + 2 * pad}x{w + 2 * pad}")
    if bias is not None and bias.shape != (cout,):
        raise DimensionError(f"conv2d: bias {bias.shape} does not match {cout} output channels")

    ho, wo = conv_output_size(h, kh, stride, pad), conv_output_size(w, kw, stride, pad)
    Xp = np.pad(X, ((0, 0), (pad, pad), (pad, pad))) if pad else X
    win = sliding_window_view(Xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride][:, :ho, :wo]
    # cols: [Cin*kh*kw, ho*wo]
    cols = win.transpose(0, 3, 4, 1, 2).reshape(cin * kh * kw, ho * wo)
    Kmat = K.reshape(cout, -1)
    out = Kmat @ cols
    if bias is not None:
        out = out + bias.value[:, None]
    out = out.reshape(cout, ho, wo)

    def vjp(g):
        gm = g.reshape(cout, ho * wo)
        dK = (gm @ cols.T).reshape(K.shape)
        dcols = (Kmat.T @ gm).reshape(cin, kh, kw, ho, wo)
        dXp = np.zeros_like(Xp)
        for i in range(kh):
            for j in range(kw):
                dXp[:, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, i, j]
        dX = dXp[:, pad:pad + h, pad:pad + w] if pad else dXp
        if bias is None:
            return dX, dK
        return dX, dK, gm.sum(axis=1)

    parents = (x, k) if bias is None else (x, k, bias)
    return x.graph.record("conv2d", out, parents, vjp)


def add(a: Node, b: Node) -> Node:
    if a.shape != b.shape:
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} differ")
    return a.graph.record("add", a.value + b.value, (a, b), lambda g: (g, g))


def add_bias(x: Node, b: Node) -> Node:
    """Add a vector along the last axis of ``x`` (the row bias of a linear layer)."""
    if b.value.ndim != 1 or x.shape[-1:] != b.shape:
        raise DimensionError(f"add_bias: bias {b.shape} does not match last axis of {x.shape}")
    lead = tuple(range(x.value.ndim - 1))
    return x.graph.record("add_bias", x.value + b.value, (x, b), lambda g: (g, g.sum(axis=lead)))


def mul_scalar(x: Node, c: float) -> Node:
    c = float(c)
    return x.graph.record("mul_scalar", x.value * c, (x,), lambda g: (g * c,))


def relu(x: Node) -> Node:
    mask = x.value > 0
    return x.graph.record("relu", np.where(mask, x.value, 0.0), (x,), lambda g: (g * mask,))


def layer_norm(x: Node, gamma: Node, beta: Node, eps: float = LAYER_NORM_EPS) -> Node:
    X = x.value
    n = X.shape[-1]
    if gamma.shape != (n,) or beta.shape != (n,):
        raise DimensionError(f"layer_norm: gamma {gamma.shape} / beta {beta.shape} do not match last axis {n}")
    mu = X.mean(axis=-1, keepdims=True)
    xc = X - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    G = gamma.value
    lead = tuple(range(X.ndim - 1))

    def vjp(g):
        gx = g * G
        dX = inv * (gx - gx.mean(axis=-1, keepdims=True)
                    - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        return dX, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return x.graph.record("layer_norm", xhat * G + beta.value, (x, gamma, beta), vjp)


def transpose2d(x: Node) -> Node:
    if x.value.ndim != 2:
        raise DimensionError(f"transpose2d: expected a matrix, got shape {x.shape}")
    return x.graph.record("transpose2d", x.value.T.copy(), (x,), lambda g: (g.T,))


def reshape(x: Node, shape: Sequence[int]) -> Node:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != x.value.size:
        raise DimensionError(f"reshape: cannot view {x.shape} as {shape}")
    src = x.shape
    return x.graph.record("reshape", x.value.reshape(shape), (x,), lambda g: (g.reshape(src),))


def mean_pool2x2(x: Node) -> Node:
    X = x.value
    if X.ndim != 3 or X.shape[1] % 2 or X.shape[2] % 2:
        raise DimensionError(f"mean_pool2x2: need [C, even H, even W], got {X.shape}")
    c, h, w = X.shape
    out = X.reshape(c, h // 2, 2, w // 2, 2).mean(axis=(2, 4))

    def vjp(g):
        return (np.repeat(np.repeat(g, 2, axis=1), 2, axis=2) * 0.25,)

    return x.graph.record("mean_pool2x2", out, (x,), vjp)


def upsample_nearest2x(x: Node) -> Node:
    X = x.value
    if X.ndim not in (2, 3):
        raise DimensionError(f"upsample_nearest2x: expected [H, W] or [C, H, W], got {X.shape}")
    ax = X.ndim - 2
    out = np.repeat(np.repeat(X, 2, axis=ax), 2, axis=ax + 1)

    def vjp(g):
        s = g.shape
        return (g.reshape(s[:-2] + (s[-2] // 2, 2, s[-1] // 2, 2)).sum(axis=(ax + 1, ax + 3)),)

    return x.graph.record("upsample_nearest2x", out, (x,), vjp)


def concat(xs: Sequence[Node], axis: int = 0) -> Node:
    vals = [n.value for n in xs]
    ref = vals[0].shape
    for v in vals[1:]:
        if v.ndim != len(ref) or any(a != b for i, (a, b) in enumerate(zip(v.shape, ref)) if i != axis):
            raise DimensionError(f"concat: shapes {[v.shape for v in vals]} disagree off axis {axis}")
    edges = np.cumsum([v.shape[axis] for v in vals])[:-1]

    def vjp(g):
        return tuple(np.split(g, edges, axis=axis))

    return xs[0].graph.record("concat", np.concatenate(vals, axis=axis), tuple(xs), vjp)


def slice_axis(x: Node, axis: int, start: int, stop: int) -> Node:
    X = x.value
    if not 0 <= start < stop <= X.shape[axis]:
        raise DimensionError(f"slice_axis: [{start}:{stop}] out of range for axis {axis} of {X.shape}")
    idx = [slice(None)] * X.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)

    def vjp(g):
        out = np.zeros_like(X)
        out[idx] = g
        return (out,)

    return x.graph.record("slice_axis", X[idx].copy(), (x,), vjp)


def sum_all(x: Node) -> Node:
    shape = x.shape
    return x.graph.record("sum_all", np.array(x.value.sum()), (x,),
                          lambda g: (np.full(shape, float(g)),))


def mean_all(x: Node) -> Node:
    shape, n = x.shape, x.value.size
    return x.graph.record("mean_all", np.array(x.value.mean()), (x,),
                          lambda g: (np.full(shape, float(g) / n),))


def bce_with_logits(z: Node, y: np.ndarray) -> Node:
    """Mean binary cross-entropy of logits ``z`` against a fixed 0/1 target ``y``.

    Uses ``max(z, 0) - z*y + log1p(exp(-|z|))``, which equals
    ``log(1 + exp(-z)) + (1 - y)*z`` without overflow.
    """
    Z = z.value
    y = np.asarray(y, dtype=Z.dtype)
    if y.shape != Z.shape:
        raise DimensionError(f"bce_loss: logits {Z.shape} and target {y.shape} differ")
    loss = np.mean(np.maximum(Z, 0.0) - Z * y + np.log1p(np.exp(-np.abs(Z))))
    n = Z.size

    def vjp(g):
        return (float(g) * (sigmoid(Z) - y) / n,)

    return z.graph.record("bce_loss", np.array(loss), (z,), vjp)


def sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    e = np.exp(z[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def weighted_sum(x: Node, w: np.ndarray) -> Node:
    """``sum(x * w)`` for a fixed weight array; the usual probe loss for gradient checks."""
    w = np.asarray(w, dtype=x.value.dtype)
    if w.shape != x.shape:
        raise DimensionError(f"weighted_sum: weights {w.shape} do not match {x.shape}")
    return x.graph.record("weighted_sum", np.array(np.sum(x.value * w)), (x,), lambda g: (float(g) * w,))

