"""Reverse-mode differentiation on dense float64 arrays.

A :class:`Tape` records every operation whose inputs live on it.  Tensors
that were never placed on a tape are plain constants: operations on them run
the forward computation only.

Example
-------
>>> tape = Tape()
>>> x = tape.variable([1.0, 2.0])
>>> grads = tape.backward(reduce_sum(x * x))
>>> grads[x]
array([2., 4.])
"""

import numpy as np
from scipy.linalg import lapack
from scipy.special import expit

__all__ = [
    "DimensionError",
    "DomainError",
    "DefinitenessError",
    "Tensor",
    "Tape",
    "Gradients",
    "constant",
    "matmul",
    "add",
    "sub",
    "mul",
    "negate",
    "tanh",
    "exp",
    "log",
    "softplus",
    "sigmoid",
    "reduce_sum",
    "reduce_mean",
    "transpose",
    "reshape",
    "concat",
    "columns",
    "repeat_columns",
    "spd_solve",
    "cholesky",
    "numerical_gradient",
]


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class DomainError(ValueError):
    """Input lies outside the domain of an operation."""


class DefinitenessError(np.linalg.LinAlgError):
    """Symmetric factorization failed; ``pivot`` is the 0-based failing index."""

    def __init__(self, pivot, message=None):
        self.pivot = pivot
        super().__init__(message or f"matrix is not positive definite (pivot {pivot})")


class Tensor:
    """Dense float64 array, optionally attached to a :class:`Tape`."""

    __slots__ = ("data", "tape", "node")
    __array_ufunc__ = None

    def __init__(self, data, tape=None, node=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.tape = tape
        self.node = node

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def T(self):
        return transpose(self)

    def numpy(self):
        return self.data

    def __repr__(self):
        where = f", node={self.node}" if self.tape is not None else ""
        return f"Tensor(shape={self.shape}{where})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return negate(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)


def constant(value):
    """Wrap ``value`` as a tape-free tensor."""
    if isinstance(value, Tensor):
        return Tensor(value.data)
    return Tensor(value)


class _Node:
    __slots__ = ("kind", "parents", "vjp", "shape")

    def __init__(self, kind, parents, vjp, shape):
        self.kind = kind
        self.parents = parents
        self.vjp = vjp
        self.shape = shape


class Gradients:
    """Result of :meth:`Tape.backward`; index by tensor to get its gradient."""

    def __init__(self, tape, slots):
        self._tape = tape
        self._slots = slots

    def __getitem__(self, tensor):
        if tensor.tape is not self._tape:
            raise KeyError("tensor does not belong to this tape")
        g = self._slots[tensor.node]
        if g is None:
            return np.zeros(tensor.shape)
        return g

    def __len__(self):
        return len(self._slots)


class Tape:
    """Append-only record of operations, replayed in reverse by :meth:`backward`."""

    def __init__(self):
        self.nodes = []

    def __len__(self):
        return len(self.nodes)

    def variable(self, value):
        """Register ``value`` as a leaf whose gradient is wanted."""
        data = value.data if isinstance(value, Tensor) else value
        return self._push("leaf", (), None, np.array(data, dtype=np.float64))

    def _push(self, kind, parents, vjp, data):
        node = len(self.nodes)
        self.nodes.append(_Node(kind, parents, vjp, data.shape))
        return Tensor(data, self, node)

    def backward(self, root):
        """Propagate d(root)/d(node) to every node recorded before ``root``."""
        if root.tape is not self:
            raise ValueError("root is not recorded on this tape")
        if root.size != 1:
            raise DimensionError(f"backward needs a scalar root, got shape {root.shape}")
        slots = [None] * len(self.nodes)
        slots[root.node] = np.ones(root.shape)
        for idx in range(root.node, -1, -1):
            g = slots[idx]
            node = self.nodes[idx]
            if g is None or node.vjp is None:
                continue
            for parent, pg in zip(node.parents, node.vjp(g)):
                if parent is None or pg is None:
                    continue
                if slots[parent] is None:
                    slots[parent] = np.array(pg, dtype=np.float64)
                else:
                    slots[parent] = slots[parent] + pg
        return Gradients(self, slots)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _tape_of(*tensors):
    tape = None
    for t in tensors:
        if t.tape is None:
            continue
        if tape is None:
            tape = t.tape
        elif t.tape is not tape:
            raise ValueError("operands belong to different tapes")
    return tape


def _record(kind, inputs, data, vjp):
    tape = _tape_of(*inputs)
    if tape is None:
        return Tensor(data)
    parents = tuple(t.node if t.tape is tape else None for t in inputs)
    return tape._push(kind, parents, vjp, data)


def _same_shape(kind, a, b):
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise DimensionError(f"{kind}: shapes {a.shape} and {b.shape} differ")


def _unbroadcast(g, shape):
    # scalar-tensor broadcasting only
    if g.shape == shape:
        return g
    return np.reshape(np.sum(g), shape)


# ---------------------------------------------------------------------------
# binary elementwise


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape("add", a, b)
    return _record(
        "add", (a, b), a.data + b.data,
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape("sub", a, b)
    return _record(
        "sub", (a, b), a.data - b.data,
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _record(
        "mul", (a, b), ad * bd,
        lambda g: (_unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)),
    )


# ---------------------------------------------------------------------------
# unary elementwise


def negate(a):
    a = _as_tensor(a)
    return _record("negate", (a,), -a.data, lambda g: (-g,))


def tanh(a):
    a = _as_tensor(a)
    out = np.tanh(a.data)
    return _record("tanh", (a,), out, lambda g: (g * (1.0 - out * out),))


def exp(a):
    a = _as_tensor(a)
    out = np.exp(a.data)
    return _record("exp", (a,), out, lambda g: (g * out,))


def log(a):
    a = _as_tensor(a)
    if np.any(a.data <= 0.0):
        raise DomainError("log of a non-positive value")
    ad = a.data
    return _record("log", (a,), np.log(ad), lambda g: (g / ad,))


def softplus(a):
    """``log(1 + exp(a))`` evaluated as ``max(a, 0) + log1p(exp(-|a|))``."""
    a = _as_tensor(a)
    ad = a.data
    out = np.maximum(ad, 0.0) + np.log1p(np.exp(-np.abs(ad)))
    return _record("softplus", (a,), out, lambda g: (g * expit(ad),))


def sigmoid(a):
    a = _as_tensor(a)
    out = expit(a.data)
    return _record("sigmoid", (a,), out, lambda g: (g * out * (1.0 - out),))


# ---------------------------------------------------------------------------
# reductions and reshaping


def _check_axis(a, axis):
    if axis is not None and not -a.ndim <= axis < a.ndim:
        raise DimensionError(f"axis {axis} invalid for shape {a.shape}")


def reduce_sum(a, axis=None):
    a = _as_tensor(a)
    _check_axis(a, axis)
    shape = a.shape

    def vjp(g):
        if axis is None:
            return (np.full(shape, float(g)),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape),)

    return _record("sum", (a,), np.sum(a.data, axis=axis), vjp)


def reduce_mean(a, axis=None):
    a = _as_tensor(a)
    _check_axis(a, axis)
    count = a.size if axis is None else a.shape[axis]
    return mul(reduce_sum(a, axis), 1.0 / count)


def transpose(a):
    a = _as_tensor(a)
    if a.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got shape {a.shape}")
    return _record("transpose", (a,), a.data.T.copy(), lambda g: (g.T,))


def reshape(a, shape):
    a = _as_tensor(a)
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {a.shape} to {shape}") from exc
    old = a.shape
    return _record("reshape", (a,), out, lambda g: (g.reshape(old),))


def concat(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(
            "concat: incompatible shapes " + ", ".join(str(t.shape) for t in tensors)
        ) from exc
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def vjp(g):
        return tuple(
            np.take(g, np.arange(lo, hi), axis=axis) for lo, hi in zip(bounds[:-1], bounds[1:])
        )

    return _record("concat", tuple(tensors), out, vjp)


def columns(a, start, stop):
    """Columns ``start:stop`` of a matrix (or elements of a vector)."""
    a = _as_tensor(a)
    shape = a.shape
    out = a.data[..., start:stop].copy()

    def vjp(g):
        full = np.zeros(shape)
        full[..., start:stop] = g
        return (full,)

    return _record("columns", (a,), out, vjp)


def repeat_columns(a, count):
    """Repeat every column of a matrix ``count`` times in place (``np.repeat``)."""
    a = _as_tensor(a)
    if a.ndim != 2:
        raise DimensionError(f"repeat_columns expects a matrix, got shape {a.shape}")
    rows, cols = a.shape
    return _record(
        "repeat_columns", (a,), np.repeat(a.data, count, axis=1),
        lambda g: (g.reshape(rows, cols, count).sum(axis=2),),
    )


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    ad, bd = a.data, b.data
    return _record("matmul", (a, b), ad @ bd, lambda g: (g @ bd.T, ad.T @ g))


def cholesky(a):
    """Lower Cholesky factor of a symmetric positive definite array.

    Raises :class:`DefinitenessError` naming the first non-positive pivot.
    """
    a = np.asarray(a, dtype=np.float64)
    c, info = lapack.dpotrf(a, lower=1, clean=1)
    if info > 0:
        raise DefinitenessError(info - 1)
    if info < 0:
        raise ValueError(f"dpotrf: illegal argument {-info}")
    return c


def _cho_solve(c, b):
    x, info = lapack.dpotrs(c, b, lower=1)
    if info != 0:
        raise ValueError(f"dpotrs: illegal argument {-info}")
    return x


def spd_solve(a, b, factor=None):
    """Solve ``a @ c = b`` for symmetric positive definite ``a``.

    ``factor`` may carry a lower Cholesky factor of ``a`` from :func:`cholesky`
    to skip refactorization.  The factor is kept for the backward pass, where
    ``db = a^{-1} dc`` and ``da = -sym(db c^T)``.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionError(f"spd_solve: matrix must be square, got {a.shape}")
    vector = b.ndim == 1
    if b.shape[0] != a.shape[0] or b.ndim > 2:
        raise DimensionError(f"spd_solve: shapes {a.shape} and {b.shape} are not aligned")
    ad = a.data
    scale = np.max(np.abs(ad)) if ad.size else 0.0
    if np.max(np.abs(ad - ad.T), initial=0.0) > 1e-10 * max(scale, 1e-300):
        raise DomainError("spd_solve: matrix is not symmetric")
    c = cholesky(ad) if factor is None else factor
    bd = b.data[:, None] if vector else b.data
    out = _cho_solve(c, bd)

    def vjp(g):
        g2 = g[:, None] if vector else g
        db = _cho_solve(c, g2)
        da = -db @ out.T
        da = 0.5 * (da + da.T)
        return (da, db[:, 0] if vector else db)

    return _record("spd_solve", (a, b), out[:, 0] if vector else out, vjp)


# ---------------------------------------------------------------------------


def numerical_gradient(f, x, h=1e-5):
    """Central finite-difference gradient of scalar ``f`` at array ``x``."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = float(f(x))
        flat[i] = old - h
        fm = float(f(x))
        flat[i] = old
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad
