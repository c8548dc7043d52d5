"""Reverse-mode automatic differentiation over dense float64 arrays.

Every backward rule is itself written with the differentiable ops in this
module, so gradients computed with ``build_graph=True`` are graph nodes and
can be differentiated again. That is what second-order MAML needs.

Values are plain ``numpy.ndarray`` (float64, row-major). A :class:`Node`
wraps a value together with the op that produced it.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Node",
    "GradientError",
    "constant",
    "parameter",
    "grad",
    "no_graph",
    "finite_difference_gradient",
    "add",
    "sub",
    "mul",
    "neg",
    "scale",
    "mul_const",
    "matmul",
    "transpose",
    "add_bias",
    "sum_rows",
    "broadcast_rows",
    "sum_cols",
    "broadcast_cols",
    "sum_all",
    "broadcast_scalar",
    "leaky_relu",
    "relu",
    "exp",
    "logsumexp_rows",
    "index_rows",
    "scatter_rows",
    "concat_rows",
    "slice_rows",
    "pad_rows",
    "mix_rows",
    "mse",
    "softmax_cross_entropy",
]


class GradientError(RuntimeError):
    """Raised for a malformed differentiation request or a non-finite value."""


_state = threading.local()


def _recording() -> bool:
    return getattr(_state, "record", True)


@contextmanager
def _recording_mode(flag: bool):
    prev = _recording()
    _state.record = flag
    try:
        yield
    finally:
        _state.record = prev


def no_graph():
    """Context manager: ops evaluate values only and record nothing."""
    return _recording_mode(False)


class Node:
    __slots__ = ("value", "parents", "backward", "requires_grad", "op")

    def __init__(self, value, parents=(), backward=None, requires_grad=False, op="leaf"):
        self.value = value
        self.parents = parents
        self.backward = backward
        self.requires_grad = requires_grad
        self.op = op

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node(op={self.op}, shape={self.value.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _as_node(other))

    def __radd__(self, other):
        return add(_as_node(other), self)

    def __sub__(self, other):
        return sub(self, _as_node(other))

    def __rsub__(self, other):
        return sub(_as_node(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, _as_node(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _as_node(other))

    @property
    def T(self):
        return transpose(self)


def _as_node(x) -> Node:
    if isinstance(x, Node):
        return x
    return constant(x)


def constant(value) -> Node:
    return Node(np.asarray(value, dtype=np.float64))


def parameter(value) -> Node:
    """Leaf node that gradients can be taken with respect to."""
    return Node(np.array(value, dtype=np.float64), requires_grad=True)


def _check_finite(value: np.ndarray, op: str) -> None:
    # one reduction instead of an elementwise mask; any NaN/Inf makes the sum non-finite
    if not np.isfinite(np.add.reduce(value, axis=None)):
        if np.isfinite(value).all():
            return  # finite entries whose sum overflowed
        raise GradientError(f"non-finite value produced by op '{op}'")


def _make(value, parents: tuple, backward: Callable, op: str) -> Node:
    _check_finite(value, op)
    if _recording() and any(p.requires_grad for p in parents):
        return Node(value, parents, backward, True, op)
    return Node(value, op=op)


def _shape_check(a: Node, b: Node, op: str) -> None:
    if a.value.shape != b.value.shape:
        raise ValueError(f"{op}: shape mismatch {a.value.shape} vs {b.value.shape}")


# ---------------------------------------------------------------------------
# primitives


def add(a: Node, b: Node) -> Node:
    _shape_check(a, b, "add")
    return _make(a.value + b.value, (a, b), lambda g: (g, g), "add")


def sub(a: Node, b: Node) -> Node:
    _shape_check(a, b, "sub")
    return _make(a.value - b.value, (a, b), lambda g: (g, neg(g)), "sub")


def mul(a: Node, b: Node) -> Node:
    _shape_check(a, b, "mul")
    return _make(a.value * b.value, (a, b), lambda g: (mul(g, b), mul(g, a)), "mul")


def neg(a: Node) -> Node:
    return _make(-a.value, (a,), lambda g: (neg(g),), "neg")


def scale(a: Node, s: float) -> Node:
    s = float(s)
    return _make(a.value * s, (a,), lambda g: (scale(g, s),), "scale")


def mul_const(a: Node, c) -> Node:
    c = np.asarray(c, dtype=np.float64)
    if c.shape != a.value.shape:
        raise ValueError(f"mul_const: shape mismatch {a.value.shape} vs {c.shape}")
    return _make(a.value * c, (a,), lambda g: (mul_const(g, c),), "mul_const")


def matmul(a: Node, b: Node, ta: bool = False, tb: bool = False) -> Node:
    """``op(a) @ op(b)`` where ``op`` transposes when the matching flag is set."""
    av = a.value.T if ta else a.value
    bv = b.value.T if tb else b.value
    if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {av.shape} @ {bv.shape}")

    def backward(g):
        ga = matmul(b, g, ta=tb, tb=True) if ta else matmul(g, b, tb=not tb)
        gb = matmul(g, a, ta=True, tb=ta) if tb else matmul(a, g, ta=not ta)
        return ga, gb

    with np.errstate(over="ignore", invalid="ignore"):
        out = av @ bv
    return _make(out, (a, b), backward, "matmul")


def transpose(a: Node) -> Node:
    return _make(a.value.T.copy(), (a,), lambda g: (transpose(g),), "transpose")


def add_bias(x: Node, b: Node) -> Node:
    if x.value.ndim != 2 or b.value.shape != (x.value.shape[1],):
        raise ValueError(f"add_bias: bias {b.value.shape} does not fit {x.value.shape}")
    return _make(x.value + b.value, (x, b), lambda g: (g, sum_rows(g)), "add_bias")


def sum_rows(x: Node) -> Node:
    n = x.value.shape[0]
    return _make(x.value.sum(axis=0), (x,), lambda g: (broadcast_rows(g, n),), "sum_rows")


def broadcast_rows(v: Node, n: int) -> Node:
    value = np.broadcast_to(v.value, (n,) + v.value.shape).copy()
    return _make(value, (v,), lambda g: (sum_rows(g),), "broadcast_rows")


def sum_cols(x: Node) -> Node:
    k = x.value.shape[1]
    return _make(x.value.sum(axis=1), (x,), lambda g: (broadcast_cols(g, k),), "sum_cols")


def broadcast_cols(v: Node, k: int) -> Node:
    value = np.repeat(v.value[:, None], k, axis=1)
    return _make(value, (v,), lambda g: (sum_cols(g),), "broadcast_cols")


def sum_all(x: Node) -> Node:
    shape = x.value.shape
    return _make(np.asarray(x.value.sum()), (x,), lambda g: (broadcast_scalar(g, shape),), "sum_all")


def broadcast_scalar(s: Node, shape) -> Node:
    return _make(np.full(shape, float(s.value)), (s,), lambda g: (sum_all(g),), "broadcast_scalar")


def leaky_relu(x: Node, slope: float = 0.01) -> Node:
    # derivative at exactly 0 takes the left branch
    mask = np.where(x.value > 0, 1.0, slope)
    return _make(x.value * mask, (x,), lambda g: (mul_const(g, mask),), "leaky_relu")


def relu(x: Node) -> Node:
    return leaky_relu(x, 0.0)


def exp(x: Node) -> Node:
    with np.errstate(over="ignore"):
        value = np.exp(x.value)
    out = _make(value, (x,), None, "exp")
    out.backward = lambda g: (mul(g, out),)
    return out


def logsumexp_rows(z: Node) -> Node:
    zv = z.value
    m = zv.max(axis=1, keepdims=True)
    value = (m + np.log(np.exp(zv - m).sum(axis=1, keepdims=True)))[:, 0]
    k = zv.shape[1]
    out = _make(value, (z,), None, "logsumexp_rows")

    def backward(g):
        softmax = exp(sub(z, broadcast_cols(out, k)))
        return (mul(broadcast_cols(g, k), softmax),)

    out.backward = backward
    return out


def index_rows(x: Node, idx) -> Node:
    idx = np.asarray(idx, dtype=np.int64)
    n = x.value.shape[0]
    return _make(x.value[idx], (x,), lambda g: (scatter_rows(g, idx, n),), "index_rows")


def scatter_rows(x: Node, idx, n: int) -> Node:
    """Row ``i`` of ``x`` is added into row ``idx[i]`` of an ``n``-row zero array."""
    idx = np.asarray(idx, dtype=np.int64)
    value = np.zeros((n,) + x.value.shape[1:])
    np.add.at(value, idx, x.value)
    return _make(value, (x,), lambda g: (index_rows(g, idx),), "scatter_rows")


def concat_rows(a: Node, b: Node) -> Node:
    if a.value.shape[1:] != b.value.shape[1:]:
        raise ValueError(f"concat_rows: width mismatch {a.value.shape} vs {b.value.shape}")
    na, nb = a.value.shape[0], b.value.shape[0]
    return _make(
        np.concatenate([a.value, b.value], axis=0),
        (a, b),
        lambda g: (slice_rows(g, 0, na), slice_rows(g, na, na + nb)),
        "concat_rows",
    )


def slice_rows(x: Node, start: int, stop: int) -> Node:
    n = x.value.shape[0]
    return _make(x.value[start:stop].copy(), (x,), lambda g: (pad_rows(g, start, n),), "slice_rows")


def pad_rows(x: Node, start: int, n: int) -> Node:
    m = x.value.shape[0]
    value = np.zeros((n,) + x.value.shape[1:])
    value[start:start + m] = x.value
    return _make(value, (x,), lambda g: (slice_rows(g, start, start + m),), "pad_rows")


# ---------------------------------------------------------------------------
# composites


def mix_rows(a: Node, b: Node, lam) -> Node:
    """Row-wise convex combination ``lam[j] * a[j] + (1 - lam[j]) * b[j]``."""
    lam = np.asarray(lam, dtype=np.float64)
    if lam.shape != (a.value.shape[0],):
        raise ValueError(f"mix_rows: need one coefficient per row, got {lam.shape}")
    w = np.repeat(lam[:, None], a.value.shape[1], axis=1)
    return add(mul_const(a, w), mul_const(b, 1.0 - w))


def mse(pred: Node, target) -> Node:
    """Mean over all entries of the squared error."""
    d = sub(pred, _as_node(target))
    return scale(sum_all(mul(d, d)), 1.0 / d.value.size)


def softmax_cross_entropy(logits: Node, target) -> Node:
    """Row-mean cross entropy against (possibly soft) target distributions."""
    target = _as_node(target)
    _shape_check(logits, target, "softmax_cross_entropy")
    n, k = logits.value.shape
    log_probs = sub(logits, broadcast_cols(logsumexp_rows(logits), k))
    return scale(sum_all(mul(target, log_probs)), -1.0 / n)


# ---------------------------------------------------------------------------
# differentiation


def _topo_order(root: Node) -> list[Node]:
    order: list[Node] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def grad(loss: Node, wrt: Sequence[Node], build_graph: bool = False, allow_unused: bool = False) -> list:
    """Gradients of scalar ``loss`` with respect to each node in ``wrt``.

    With ``build_graph`` the results are :class:`Node` objects wired into the
    graph, so ``grad`` can be applied to them again. Otherwise plain arrays
    are returned. ``allow_unused`` returns zeros for unreachable nodes
    instead of raising.
    """
    if loss.value.size != 1 or loss.value.ndim > 1:
        raise GradientError(f"loss must be a scalar, got shape {loss.value.shape}")
    if not loss.requires_grad:
        raise GradientError("loss does not depend on any parameter")

    order = _topo_order(loss)
    wanted = {id(w) for w in wrt}
    grads: dict[int, Node] = {id(loss): constant(np.ones_like(loss.value))}
    results: dict[int, Node] = {}

    with _recording_mode(build_graph):
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if id(node) in wanted:
                results[id(node)] = g
            if node.backward is None:
                continue
            for parent, pg in zip(node.parents, node.backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = add(grads[key], pg) if key in grads else pg

    out = []
    for i, w in enumerate(wrt):
        if id(w) not in results:
            if allow_unused:
                z = np.zeros_like(w.value)
                out.append(constant(z) if build_graph else z)
                continue
            raise GradientError(f"wrt[{i}] ({w!r}) is not reachable from the loss")
        g = results[id(w)]
        _check_finite(g.value, "backprop")
        out.append(g if build_graph else g.value)
    return out


def finite_difference_gradient(
    f: Callable[[list[np.ndarray]], float],
    params: Sequence[np.ndarray],
    eps: float = 1e-5,
) -> list[np.ndarray]:
    """Central-difference gradient of scalar ``f`` at ``params``, coordinate by coordinate."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    base = [np.array(p, dtype=np.float64) for p in params]
    out = []
    for k, p in enumerate(base):
        g = np.zeros_like(p)
        flat = p.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(f(base))
            flat[i] = orig - eps
            fm = float(f(base))
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise GradientError(f"f returned a non-finite value at param {k}, index {i}")
            gflat[i] = (fp - fm) / (2 * eps)
        out.append(g)
    return out
