"""Tape-based reverse-mode differentiation over a closed set of dense-matrix ops.

Every value is a 2-D float64 array.  Operations are evaluated eagerly when they
are recorded, so building a tape *is* the forward pass; :meth:`Tape.forward`
replays the recorded nodes against the current leaf values, which is what the
finite-difference checker relies on.

Primitive set: matmul, add (equal shapes, or a ``1 x n`` row bias onto an
``m x n`` matrix), elementwise tanh, row softmax, concatenation (along columns
or rows), slice, scalar multiply, column-broadcast product, mean, mean squared
error and elementwise minimum.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when a primitive receives incompatible operand shapes."""


class NonFiniteError(FloatingPointError):
    """Raised when a non-finite value enters or leaves the tape."""


def _as_matrix(value) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    elif arr.ndim != 2:
        raise ShapeError(f"expected at most 2 dimensions, got shape {arr.shape}")
    return arr


class Node:
    """One recorded value.  Leaves have ``op is None``."""

    __slots__ = ("tape", "index", "op", "inputs", "attrs", "value", "grad", "kind", "name")

    def __init__(self, tape, index, op, inputs, attrs, value, kind, name=None):
        self.tape = tape
        self.index = index
        self.op = op
        self.inputs = inputs
        self.attrs = attrs
        self.value = value
        self.grad = None
        self.kind = kind  # "param", "const" or "op"
        self.name = name

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    def __repr__(self) -> str:
        label = self.name or self.op or self.kind
        return f"Node(#{self.index} {label} {self.shape})"

    # operator sugar
    def __matmul__(self, other):
        return self.tape.matmul(self, other)

    def __add__(self, other):
        return self.tape.add(self, other)

    def __sub__(self, other):
        return self.tape.add(self, self.tape.scale(other, -1.0))

    def __neg__(self):
        return self.tape.scale(self, -1.0)

    def __mul__(self, other):
        if isinstance(other, Node):
            return self.tape.mul_col(self, other)
        return self.tape.scale(self, float(other))

    __rmul__ = __mul__


# ---------------------------------------------------------------------------
# forward/backward rules.  forward(values, attrs) -> array
# backward(g, values, out, attrs) -> tuple of input adjoints (None = no grad)


def _check_matmul(shapes, attrs):
    (m, k), (k2, n) = shapes
    if k != k2:
        raise ShapeError(f"matmul {shapes[0]} @ {shapes[1]}")


def _fwd_matmul(v, attrs):
    return v[0] @ v[1]


def _bwd_matmul(g, v, out, attrs):
    return g @ v[1].T, v[0].T @ g


def _check_add(shapes, attrs):
    a, b = shapes
    if a == b:
        return
    if b[0] == 1 and b[1] == a[1]:
        return
    raise ShapeError(f"add {a} + {b}")


def _fwd_add(v, attrs):
    return v[0] + v[1]


def _bwd_add(g, v, out, attrs):
    if v[1].shape == g.shape:
        return g, g
    return g, g.sum(axis=0, keepdims=True)


def _fwd_tanh(v, attrs):
    return np.tanh(v[0])


def _bwd_tanh(g, v, out, attrs):
    return (g * (1.0 - out * out),)


def _fwd_softmax(v, attrs):
    z = v[0] - v[0].max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _bwd_softmax(g, v, out, attrs):
    inner = (g * out).sum(axis=1, keepdims=True)
    return (out * (g - inner),)


def _check_concat(shapes, attrs):
    axis = attrs["axis"]
    other = 1 - axis
    if len({s[other] for s in shapes}) != 1:
        raise ShapeError(f"concat along axis {axis} of {shapes}")


def _fwd_concat(v, attrs):
    return np.concatenate(v, axis=attrs["axis"])


def _bwd_concat(g, v, out, attrs):
    axis = attrs["axis"]
    sizes = np.cumsum([x.shape[axis] for x in v])[:-1]
    return tuple(np.split(g, sizes, axis=axis))


def _check_slice(shapes, attrs):
    (m, n), = shapes
    rows, cols = attrs["rows"], attrs["cols"]
    r0, r1 = rows
    c0, c1 = cols
    if not (0 <= r0 < r1 <= m and 0 <= c0 < c1 <= n):
        raise ShapeError(f"slice rows {rows} cols {cols} out of {shapes[0]}")


def _fwd_slice(v, attrs):
    (r0, r1), (c0, c1) = attrs["rows"], attrs["cols"]
    return v[0][r0:r1, c0:c1]


def _bwd_slice(g, v, out, attrs):
    (r0, r1), (c0, c1) = attrs["rows"], attrs["cols"]
    full = np.zeros_like(v[0])
    full[r0:r1, c0:c1] = g
    return (full,)


def _fwd_scale(v, attrs):
    return v[0] * attrs["c"]


def _bwd_scale(g, v, out, attrs):
    return (g * attrs["c"],)


def _check_mul_col(shapes, attrs):
    a, b = shapes
    if a == b or (b[1] == 1 and b[0] == a[0]):
        return
    raise ShapeError(f"mul {a} * {b}")


def _fwd_mul_col(v, attrs):
    return v[0] * v[1]


def _bwd_mul_col(g, v, out, attrs):
    ga = g * v[1]
    gb = g * v[0]
    if v[1].shape != v[0].shape:
        gb = gb.sum(axis=1, keepdims=True)
    return ga, gb


def _fwd_mean(v, attrs):
    return np.array([[v[0].mean()]])


def _bwd_mean(g, v, out, attrs):
    return (np.full_like(v[0], g[0, 0] / v[0].size),)


def _check_same(shapes, attrs):
    if shapes[0] != shapes[1]:
        raise ShapeError(f"operands {shapes[0]} and {shapes[1]} differ")


def _fwd_mse(v, attrs):
    d = v[0] - v[1]
    return np.array([[np.mean(d * d)]])


def _bwd_mse(g, v, out, attrs):
    d = v[0] - v[1]
    ga = g[0, 0] * 2.0 * d / d.size
    return ga, -ga


def _fwd_minimum(v, attrs):
    return np.minimum(v[0], v[1])


def _bwd_minimum(g, v, out, attrs):
    # ties route the adjoint to the first operand
    first = v[0] <= v[1]
    return g * first, g * ~first


_OPS: dict[str, tuple[Callable, Callable, Callable | None]] = {
    "matmul": (_fwd_matmul, _bwd_matmul, _check_matmul),
    "add": (_fwd_add, _bwd_add, _check_add),
    "tanh": (_fwd_tanh, _bwd_tanh, None),
    "softmax": (_fwd_softmax, _bwd_softmax, None),
    "concat": (_fwd_concat, _bwd_concat, _check_concat),
    "slice": (_fwd_slice, _bwd_slice, _check_slice),
    "scale": (_fwd_scale, _bwd_scale, None),
    "mul_col": (_fwd_mul_col, _bwd_mul_col, _check_mul_col),
    "mean": (_fwd_mean, _bwd_mean, None),
    "mse": (_fwd_mse, _bwd_mse, _check_same),
    "minimum": (_fwd_minimum, _bwd_minimum, _check_same),
}


class Tape:
    """Ordered record of a computation (the nodes are in topological order).

    ``param`` leaves receive adjoints in :meth:`backward`; ``const`` leaves do
    not, and neither do ops that depend only on constants.
    """

    def __init__(self, check_finite: bool = True):
        self.nodes: list[Node] = []
        self.check_finite = check_finite
        self._forwarded = True
        self._backwarded = False

    # -- leaves ------------------------------------------------------------
    def param(self, value: np.ndarray, name: str | None = None) -> Node:
        """Register a differentiable leaf.  The node aliases ``value``."""
        arr = value if isinstance(value, np.ndarray) and value.dtype == np.float64 and value.ndim == 2 else _as_matrix(value)
        return self._leaf(arr, "param", name)

    def const(self, value, name: str | None = None) -> Node:
        return self._leaf(_as_matrix(value), "const", name)

    def _leaf(self, arr, kind, name):
        if self.check_finite and not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"non-finite input to {kind} leaf {name!r}")
        node = Node(self, len(self.nodes), None, (), None, arr, kind, name)
        self.nodes.append(node)
        return node

    # -- primitives ----------------------------------------------------------
    def _record(self, op: str, inputs: Sequence[Node], **attrs) -> Node:
        for x in inputs:
            if x.tape is not self:
                raise ValueError(f"{x!r} belongs to a different tape")
        fwd, _, check = _OPS[op]
        if check is not None:
            try:
                check([x.shape for x in inputs], attrs)
            except ShapeError as exc:
                raise ShapeError(f"node #{len(self.nodes)} ({op}): {exc}") from None
        value = fwd([x.value for x in inputs], attrs)
        kind = "op" if any(x.kind != "const" for x in inputs) else "const"
        node = Node(self, len(self.nodes), op, tuple(inputs), attrs, value, kind)
        self.nodes.append(node)
        return node

    def matmul(self, a: Node, b: Node) -> Node:
        return self._record("matmul", (a, b))

    def add(self, a: Node, b: Node) -> Node:
        return self._record("add", (a, b))

    def tanh(self, a: Node) -> Node:
        return self._record("tanh", (a,))

    def softmax(self, a: Node) -> Node:
        """Softmax across each row."""
        return self._record("softmax", (a,))

    def concat(self, parts: Sequence[Node], axis: int = 1) -> Node:
        """Concatenate along columns (``axis=1``) or rows (``axis=0``)."""
        return self._record("concat", tuple(parts), axis=axis)

    def slice(self, a: Node, rows=None, cols=None) -> Node:
        m, n = a.shape
        rows = (0, m) if rows is None else tuple(rows)
        cols = (0, n) if cols is None else tuple(cols)
        return self._record("slice", (a,), rows=rows, cols=cols)

    def scale(self, a: Node, c: float) -> Node:
        return self._record("scale", (a,), c=float(c))

    def mul_col(self, a: Node, b: Node) -> Node:
        """Elementwise product; ``b`` may be an ``m x 1`` column broadcast across ``a``."""
        return self._record("mul_col", (a, b))

    def mean(self, a: Node) -> Node:
        return self._record("mean", (a,))

    def mse(self, a: Node, b: Node) -> Node:
        return self._record("mse", (a, b))

    def minimum(self, a: Node, b: Node) -> Node:
        return self._record("minimum", (a, b))

    # -- evaluation --------------------------------------------------------
    def params(self) -> list[Node]:
        return [n for n in self.nodes if n.kind == "param"]

    def invalidate(self) -> None:
        """Mark cached values stale, e.g. after mutating a leaf in place."""
        self._forwarded = False

    def forward(self, terminal: Node | None = None) -> np.ndarray:
        """Recompute every op node from current leaf values; return the terminal value."""
        for node in self.nodes:
            if node.op is None:
                if self.check_finite and not np.all(np.isfinite(node.value)):
                    raise NonFiniteError(f"non-finite leaf {node!r}")
                continue
            fwd = _OPS[node.op][0]
            node.value = fwd([x.value for x in node.inputs], node.attrs)
        self._forwarded = True
        terminal = self.nodes[-1] if terminal is None else terminal
        return terminal.value

    def backward(self, terminal: Node | None = None) -> dict[int, np.ndarray]:
        """Propagate adjoints of a scalar terminal; return ``{param index: adjoint}``.

        Adjoints of non-parameter nodes are released once used.
        """
        if not self._forwarded:
            raise RuntimeError("backward called before forward on a stale tape")
        terminal = self.nodes[-1] if terminal is None else terminal
        if terminal.shape != (1, 1):
            raise ShapeError(f"backward needs a scalar terminal, got {terminal.shape}")
        if self.check_finite and not np.isfinite(terminal.value[0, 0]):
            raise NonFiniteError("terminal value is not finite")
        for node in self.nodes:
            node.grad = None
        terminal.grad = np.ones((1, 1))
        for node in reversed(self.nodes[: terminal.index + 1]):
            g = node.grad
            if g is None or node.op is None:
                continue
            bwd = _OPS[node.op][1]
            grads = bwd(g, [x.value for x in node.inputs], node.value, node.attrs)
            for x, gx in zip(node.inputs, grads):
                if x.kind == "const" or gx is None:
                    continue
                x.grad = gx if x.grad is None else x.grad + gx
            node.grad = None
        out = {}
        for node in self.nodes:
            if node.kind == "param":
                out[node.index] = node.grad if node.grad is not None else np.zeros_like(node.value)
        self._backwarded = True
        return out


def grad_check(tape: Tape, terminal: Node | None = None, h: float = 1e-5,
               params: Sequence[Node] | None = None, max_entries: int | None = None,
               rng: np.random.Generator | None = None) -> tuple[float, list[tuple[float, Node, tuple[int, int]]]]:
    """Compare reverse-mode adjoints to central differences.

    Returns ``(max_rel_err, worst)`` where ``worst`` lists the five largest
    offenders as ``(rel_err, node, (row, col))``.  Relative error per entry is
    ``|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)``.  When
    ``max_entries`` is given, that many entries per parameter are checked,
    chosen by ``rng``.
    """
    terminal = tape.nodes[-1] if terminal is None else terminal
    params = tape.params() if params is None else list(params)
    tape.forward(terminal)
    analytic = tape.backward(terminal)
    errs: list[tuple[float, Node, tuple[int, int]]] = []
    for p in params:
        grad = analytic[p.index]
        flat = p.value.reshape(-1)
        if not np.shares_memory(flat, p.value):
            raise ValueError(f"{p!r} is not contiguous; cannot perturb in place")
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            rng = rng or np.random.default_rng(0)
            idx = rng.choice(flat.size, size=max_entries, replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            up = tape.forward(terminal)[0, 0]
            flat[i] = orig - h
            down = tape.forward(terminal)[0, 0]
            flat[i] = orig
            num = (up - down) / (2 * h)
            ana = grad.reshape(-1)[i]
            rel = abs(ana - num) / max(abs(ana), abs(num), 1e-8)
            errs.append((rel, p, divmod(int(i), p.shape[1])))
    tape.forward(terminal)
    errs.sort(key=lambda e: e[0], reverse=True)
    return (errs[0][0] if errs else 0.0), errs[:5]
