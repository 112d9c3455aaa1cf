"""Dense-network numerics with a small reverse-mode tape.

Every operation accepts plain ``numpy`` arrays or :class:`Node` objects.  With
arrays it simply evaluates; if any operand is a ``Node`` the result is recorded
on that node's :class:`Tape` so :func:`backward` can replay it in reverse.  Both
paths share the same forward kernels, so values agree bit-for-bit.
"""

from __future__ import annotations

from typing import Callable, Dict, Optional, Sequence

import numpy as np

Gradients = Dict[str, np.ndarray]


class ShapeError(ValueError):
    """Operand shapes do not conform."""


class Node:
    """A value recorded on a tape."""

    __slots__ = ("tape", "index", "value", "op", "parents", "name", "_vjps", "_forward")

    def __init__(self, tape, index, value, op, parents=(), vjps=(), forward=None, name=None):
        self.tape = tape
        self.index = index
        self.value = value
        self.op = op
        self.parents = parents
        self.name = name
        self._vjps = vjps
        self._forward = forward

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node({self.op}, shape={self.value.shape})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent):
        return power(self, exponent)


class Tape:
    """Ordered record of primitive operations (the computation record)."""

    def __init__(self):
        self.nodes: list[Node] = []

    def variable(self, value, name: Optional[str] = None) -> Node:
        """Register a leaf whose gradient is wanted (a parameter or designated input)."""
        arr = np.array(value, dtype=np.float64)
        arr.flags.writeable = False
        node = Node(self, len(self.nodes), arr, "leaf", name=name)
        self.nodes.append(node)
        return node

    def _push(self, op, parents, value, vjps, forward):
        value = np.asarray(value, dtype=np.float64)
        value.flags.writeable = False
        node = Node(self, len(self.nodes), value, op, tuple(parents), tuple(vjps), forward)
        self.nodes.append(node)
        return node

    def replay(self) -> list[np.ndarray]:
        """Re-run every recorded forward kernel from the leaves; returns values by index."""
        values: list[np.ndarray] = []
        for node in self.nodes:
            if node.op == "leaf":
                values.append(node.value)
                continue
            args = [values[p.index] if isinstance(p, Node) else p for p in node.parents]
            values.append(np.asarray(node._forward(*args), dtype=np.float64))
        return values

    def reachable(self, output: Node) -> set[int]:
        seen = {output.index}
        for node in reversed(self.nodes[: output.index + 1]):
            if node.index not in seen:
                continue
            for p in node.parents:
                if isinstance(p, Node):
                    seen.add(p.index)
        return seen


def _tape_of(args) -> Optional[Tape]:
    tape = None
    for a in args:
        if isinstance(a, Node):
            if tape is None:
                tape = a.tape
            elif a.tape is not tape:
                raise ValueError("operands belong to different tapes")
    return tape


def _val(a):
    return a.value if isinstance(a, Node) else np.asarray(a, dtype=np.float64)


def _apply(op: str, forward: Callable, args: Sequence, vjps: Sequence[Callable]):
    """Evaluate ``forward`` on ``args``; record it if any arg is a Node.

    ``vjps[i](g, out, *values)`` returns the cotangent for ``args[i]``.
    """
    values = [_val(a) for a in args]
    out = forward(*values)
    tape = _tape_of(args)
    if tape is None:
        return out
    # constants are frozen into the record so replay needs only the leaves
    parents = [a if isinstance(a, Node) else v for a, v in zip(args, values)]
    return tape._push(op, parents, out, vjps, forward)


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def _affine_fwd(x, W, b):
    return x @ W.T + b


def affine(x, W, b):
    """``W @ x + b`` for a vector ``x`` of shape (n,), or row-wise for a batch (B, n)."""
    xs, Ws, bs = _val(x).shape, _val(W).shape, _val(b).shape
    if len(Ws) != 2 or len(xs) not in (1, 2) or xs[-1] != Ws[1] or bs != (Ws[0],):
        raise ShapeError(f"affine: cannot apply W{Ws} + b{bs} to x{xs}")

    def gx(g, out, x, W, b):
        return g @ W

    def gW(g, out, x, W, b):
        return np.outer(g, x) if x.ndim == 1 else g.T @ x

    def gb(g, out, x, W, b):
        return g if g.ndim == 1 else g.sum(axis=0)

    return _apply("affine", _affine_fwd, (x, W, b), (gx, gW, gb))


def _relu_fwd(x):
    return np.maximum(x, 0.0)


def relu(x):
    return _apply("relu", _relu_fwd, (x,), (lambda g, out, x: g * (x > 0),))


def _sigmoid_fwd(x):
    # exp(-|x|) never overflows
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(x):
    return _apply("sigmoid", _sigmoid_fwd, (x,), (lambda g, out, x: g * out * (1.0 - out),))


def _check_same(name, x, y):
    xs, ys = _val(x).shape, _val(y).shape
    if xs != ys:
        raise ShapeError(f"{name}: shapes {xs} and {ys} differ")


def squared_l2(x, y):
    """Sum of squared differences; the shapes must match exactly."""
    _check_same("squared_l2", x, y)
    return sum_squares(sub(x, y))


def add(x, y):
    return _apply(
        "add",
        np.add,
        (x, y),
        (
            lambda g, out, x, y: _unbroadcast(g, x.shape),
            lambda g, out, x, y: _unbroadcast(g, y.shape),
        ),
    )


def sub(x, y):
    return _apply(
        "sub",
        np.subtract,
        (x, y),
        (
            lambda g, out, x, y: _unbroadcast(g, x.shape),
            lambda g, out, x, y: _unbroadcast(-g, y.shape),
        ),
    )


def mul(x, y):
    return _apply(
        "mul",
        np.multiply,
        (x, y),
        (
            lambda g, out, x, y: _unbroadcast(g * y, x.shape),
            lambda g, out, x, y: _unbroadcast(g * x, y.shape),
        ),
    )


def div(x, y):
    return _apply(
        "div",
        np.divide,
        (x, y),
        (
            lambda g, out, x, y: _unbroadcast(g / y, x.shape),
            lambda g, out, x, y: _unbroadcast(-g * x / (y * y), y.shape),
        ),
    )


def power(x, exponent: float):
    """Elementwise ``x ** exponent`` for a constant exponent."""
    exponent = float(exponent)

    def fwd(x):
        return np.power(x, exponent)

    def vjp(g, out, x):
        if exponent == 2.0:
            return g * 2.0 * x
        return g * exponent * np.power(x, exponent - 1.0)

    return _apply("power", fwd, (x,), (vjp,))


def exp(x):
    return _apply("exp", np.exp, (x,), (lambda g, out, x: g * out,))


def log(x):
    return _apply("log", np.log, (x,), (lambda g, out, x: g / x,))


def _expand(g, x, axis):
    if axis is None:
        return np.broadcast_to(g, x.shape)
    return np.broadcast_to(np.expand_dims(g, axis), x.shape)


def sum(x, axis: Optional[int] = None):  # noqa: A001 - mirrors numpy
    return _apply(
        "sum",
        lambda x: np.sum(x, axis=axis),
        (x,),
        (lambda g, out, x: np.array(_expand(g, x, axis)),),
    )


def mean(x, axis: Optional[int] = None):
    def vjp(g, out, x):
        n = x.size if axis is None else x.shape[axis]
        return np.array(_expand(g, x, axis)) / n

    return _apply("mean", lambda x: np.mean(x, axis=axis), (x,), (vjp,))


def sum_squares(x, axis: Optional[int] = None):
    return _apply(
        "sum_squares",
        lambda x: np.sum(x * x, axis=axis),
        (x,),
        (lambda g, out, x: 2.0 * x * _expand(g, x, axis),),
    )


def _lse_fwd(x, axis):
    m = np.max(x, axis=axis, keepdims=True)
    return np.squeeze(m, axis=axis) + np.log(np.sum(np.exp(x - m), axis=axis))


def logsumexp(x, axis: int = -1):
    """Stable ``log(sum(exp(x)))`` along ``axis``."""

    def vjp(g, out, x):
        soft = np.exp(x - np.expand_dims(out, axis))
        return soft * np.expand_dims(g, axis)

    return _apply("logsumexp", lambda x: _lse_fwd(x, axis), (x,), (vjp,))


def _sqdist_fwd(z, centers):
    diff = z[..., None, :] - centers
    return np.sum(diff * diff, axis=-1)


def sq_dist_to_centers(z, centers):
    """Squared Euclidean distance from each row of ``z`` to each center: (B, d), (k, d) -> (B, k)."""

    def gz(g, out, z, centers):
        diff = z[..., None, :] - centers
        return 2.0 * np.sum(g[..., None] * diff, axis=-2)

    def gc(g, out, z, centers):
        diff = z[..., None, :] - centers
        full = -2.0 * g[..., None] * diff
        return full.reshape(-1, *centers.shape).sum(axis=0)

    return _apply("sq_dist_to_centers", _sqdist_fwd, (z, centers), (gz, gc))


# ---------------------------------------------------------------------------
# gradients
# ---------------------------------------------------------------------------


def backward(tape: Tape, output: Node) -> Gradients:
    """Reverse-mode gradients of a scalar ``output`` w.r.t. every named leaf on ``tape``."""
    if not isinstance(output, Node) or output.tape is not tape:
        raise ValueError("backward: output was not produced by this tape")
    if output.value.size != 1 or output.value.ndim != 0:
        raise ValueError(f"backward: output must be a scalar, got shape {output.value.shape}")

    cot: dict[int, np.ndarray] = {output.index: np.ones((), dtype=np.float64)}
    for node in reversed(tape.nodes[: output.index + 1]):
        g = cot.pop(node.index, None) if node.op != "leaf" else cot.get(node.index)
        if g is None or node.op == "leaf":
            continue
        args = [_val(p) for p in node.parents]
        for parent, vjp in zip(node.parents, node._vjps):
            if not isinstance(parent, Node):
                continue
            contrib = vjp(g, node.value, *args)
            if parent.index in cot:
                cot[parent.index] = cot[parent.index] + contrib
            else:
                cot[parent.index] = contrib

    grads: Gradients = {}
    for node in tape.nodes:
        if node.op == "leaf" and node.name is not None:
            g = cot.get(node.index)
            grads[node.name] = np.zeros_like(node.value) if g is None else np.array(g, dtype=np.float64).reshape(node.value.shape)
    return grads


def value_and_grad(fn: Callable[[Node], Node], x) -> tuple[float, np.ndarray]:
    """Evaluate scalar ``fn`` at ``x`` and return its gradient w.r.t. ``x``."""
    tape = Tape()
    node = tape.variable(x, name="x")
    out = fn(node)
    if not isinstance(out, Node):
        return float(out), np.zeros_like(node.value)
    return float(out.value), backward(tape, out)["x"]


def finite_diff_gradient(fn: Callable[[np.ndarray], float], x, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function, one coordinate at a time."""
    if h <= 0:
        raise ValueError("finite_diff_gradient: h must be positive")
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        f_plus = float(fn(x))
        flat[i] = orig - h
        f_minus = float(fn(x))
        flat[i] = orig
        gflat[i] = (f_plus - f_minus) / (2.0 * h)
    return grad
