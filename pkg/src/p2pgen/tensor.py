"""Dense float64 tensors with tape-recorded reverse-mode differentiation.

Values are row-major numpy arrays. While a tape is active, every operation
appends one node to it; `backward` replays the tape once in strict reverse
append order, which makes gradient accumulation order (and therefore the
result bits) deterministic. With no active tape the same functions are plain
numpy computations, which is how generation and evaluation run.

Broadcasting is deliberately limited: binary ops take equal shapes or a
scalar (python number or size-1 tensor); the only structured broadcast is
`bias_add`, a dedicated row-vector add for affine layers.
"""

from __future__ import annotations

import contextlib

import numpy as np

__all__ = [
    "DomainError",
    "GraphError",
    "ShapeError",
    "Tape",
    "Tensor",
    "add",
    "backward",
    "bias_add",
    "concat",
    "exp",
    "log",
    "matmul",
    "matmul_t",
    "mean",
    "mul",
    "mul_const",
    "negate",
    "set_debug_checks",
    "sigmoid",
    "slice_axis",
    "sqrt",
    "square",
    "sub",
    "sum",
    "tanh",
    "tape",
    "transpose",
    "zeros",
]


class ShapeError(ValueError):
    """Operand shapes do not fit the requested operation."""


class DomainError(ValueError):
    """Operand values lie outside the operation's domain."""


class GraphError(RuntimeError):
    """Missing or misused differentiation record."""


_active_tape = None
_debug_checks = False


def set_debug_checks(enabled):
    """Toggle NaN/Inf detection on every op output. Off by default."""
    global _debug_checks
    _debug_checks = bool(enabled)


class Tensor:
    """A dense float64 array plus an optional same-shaped gradient."""

    __slots__ = ("data", "grad", "tape_id")

    def __init__(self, data):
        # asarray with order="C" keeps 0-d scalars 0-d (ascontiguousarray
        # would promote them to shape (1,))
        self.data = np.asarray(data, dtype=np.float64, order="C")
        self.grad = None
        self.tape_id = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        if self.data.size != 1:
            raise ShapeError(f"item() needs a scalar, got shape {self.data.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def sum(self, axis=None):
        return sum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def tanh(self):
        return tanh(self)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return negate(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, grad={'set' if self.grad is not None else 'none'})"


def zeros(shape):
    return Tensor(np.zeros(shape))


class _Node:
    __slots__ = ("out", "back")

    def __init__(self, out, back):
        self.out = out
        self.back = back


class Tape:
    """Append-only record of executed ops; append order is topological order."""

    def __init__(self):
        self.nodes = []

    def __len__(self):
        return len(self.nodes)


@contextlib.contextmanager
def tape():
    """Activate a fresh tape for the enclosed computation."""
    global _active_tape
    prev = _active_tape
    t = Tape()
    _active_tape = t
    try:
        yield t
    finally:
        _active_tape = prev


@contextlib.contextmanager
def no_tape():
    """Suspend recording (used by generation / evaluation paths)."""
    global _active_tape
    prev = _active_tape
    _active_tape = None
    try:
        yield
    finally:
        _active_tape = prev


def active_tape():
    return _active_tape


def backward(loss):
    """Populate gradients of everything reachable from a scalar loss.

    Node-output gradients are pass-local; leaf gradients accumulate across
    calls until explicitly reset (the trainer resets them every step).
    """
    t = _active_tape
    if t is None:
        raise GraphError("backward requires an active tape")
    if loss.data.size != 1:
        raise GraphError(f"loss must be scalar, got shape {loss.data.shape}")
    for node in t.nodes:
        node.out.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(t.nodes):
        if node.out.grad is not None:
            node.back()


def _out(arr, op):
    t = Tensor(arr)
    if _debug_checks and not np.isfinite(t.data).all():
        raise DomainError(f"{op} produced non-finite values")
    return t


def _record(out, back):
    t = _active_tape
    out.tape_id = len(t.nodes)
    t.nodes.append(_Node(out, back))


def _accum(t, g, own):
    # `own=True` promises g is freshly allocated and may be adopted in place.
    if t.grad is None:
        t.grad = g if own else g.copy()
    else:
        t.grad += g


# ---------------------------------------------------------------------------
# binary elementwise


def add(a, b):
    if not isinstance(b, Tensor):
        out = _out(a.data + float(b), "add")
        if _active_tape is not None:
            def back(a=a, out=out):
                _accum(a, out.grad, False)
            _record(out, back)
        return out
    if a.data.shape == b.data.shape:
        out = _out(a.data + b.data, "add")
        if _active_tape is not None:
            def back(a=a, b=b, out=out):
                og = out.grad
                _accum(a, og, False)
                _accum(b, og, False)
            _record(out, back)
        return out
    if b.data.size == 1:
        out = _out(a.data + b.data.reshape(()), "add")
        if _active_tape is not None:
            def back(a=a, b=b, out=out):
                og = out.grad
                _accum(a, og, False)
                _accum(b, og.sum().reshape(b.data.shape), True)
            _record(out, back)
        return out
    if a.data.size == 1:
        return add(b, a)
    raise ShapeError(f"add: shapes {a.data.shape} and {b.data.shape} differ")


def sub(a, b):
    if not isinstance(b, Tensor):
        out = _out(a.data - float(b), "sub")
        if _active_tape is not None:
            def back(a=a, out=out):
                _accum(a, out.grad, False)
            _record(out, back)
        return out
    if a.data.shape == b.data.shape:
        out = _out(a.data - b.data, "sub")
        if _active_tape is not None:
            def back(a=a, b=b, out=out):
                og = out.grad
                _accum(a, og, False)
                _accum(b, -og, True)
            _record(out, back)
        return out
    if b.data.size == 1:
        out = _out(a.data - b.data.reshape(()), "sub")
        if _active_tape is not None:
            def back(a=a, b=b, out=out):
                og = out.grad
                _accum(a, og, False)
                _accum(b, -og.sum().reshape(b.data.shape), True)
            _record(out, back)
        return out
    if a.data.size == 1:
        out = _out(a.data.reshape(()) - b.data, "sub")
        if _active_tape is not None:
            def back(a=a, b=b, out=out):
                og = out.grad
                _accum(a, og.sum().reshape(a.data.shape), True)
                _accum(b, -og, True)
            _record(out, back)
        return out
    raise ShapeError(f"sub: shapes {a.data.shape} and {b.data.shape} differ")


def mul(a, b):
    if not isinstance(b, Tensor):
        c = float(b)
        out = _out(a.data * c, "mul")
        if _active_tape is not None:
            def back(a=a, c=c, out=out):
                _accum(a, out.grad * c, True)
            _record(out, back)
        return out
    if a.data.shape == b.data.shape:
        out = _out(a.data * b.data, "mul")
        if _active_tape is not None:
            def back(a=a, b=b, out=out):
                og = out.grad
                _accum(a, og * b.data, True)
                _accum(b, og * a.data, True)
            _record(out, back)
        return out
    if b.data.size == 1:
        out = _out(a.data * b.data.reshape(()), "mul")
        if _active_tape is not None:
            def back(a=a, b=b, out=out):
                og = out.grad
                _accum(a, og * b.data.reshape(()), True)
                _accum(b, (og * a.data).sum().reshape(b.data.shape), True)
            _record(out, back)
        return out
    if a.data.size == 1:
        return mul(b, a)
    raise ShapeError(f"mul: shapes {a.data.shape} and {b.data.shape} differ")


def mul_const(a, const):
    """Elementwise multiply by a constant array; no gradient to the constant."""
    c = np.asarray(const, dtype=np.float64)
    if c.shape != a.data.shape and c.size != 1:
        raise ShapeError(f"mul_const: shapes {a.data.shape} and {c.shape} differ")
    out = _out(a.data * c, "mul_const")
    if _active_tape is not None:
        def back(a=a, c=c, out=out):
            _accum(a, out.grad * c, True)
        _record(out, back)
    return out


# ---------------------------------------------------------------------------
# unary elementwise


def negate(a):
    out = _out(-a.data, "negate")
    if _active_tape is not None:
        def back(a=a, out=out):
            _accum(a, -out.grad, True)
        _record(out, back)
    return out


def tanh(a):
    out = _out(np.tanh(a.data), "tanh")
    if _active_tape is not None:
        def back(a=a, out=out):
            _accum(a, out.grad * (1.0 - out.data * out.data), True)
        _record(out, back)
    return out


def sigmoid(a):
    # overflow of exp(-x) saturates cleanly to 0, so silence the warning
    with np.errstate(over="ignore"):
        y = 1.0 / (1.0 + np.exp(-a.data))
    out = _out(y, "sigmoid")
    if _active_tape is not None:
        def back(a=a, out=out):
            _accum(a, out.grad * out.data * (1.0 - out.data), True)
        _record(out, back)
    return out


def exp(a):
    out = _out(np.exp(a.data), "exp")
    if _active_tape is not None:
        def back(a=a, out=out):
            _accum(a, out.grad * out.data, True)
        _record(out, back)
    return out


def log(a):
    if np.any(a.data <= 0.0):
        raise DomainError("log requires strictly positive inputs")
    out = _out(np.log(a.data), "log")
    if _active_tape is not None:
        def back(a=a, out=out):
            _accum(a, out.grad / a.data, True)
        _record(out, back)
    return out


def square(a):
    out = _out(a.data * a.data, "square")
    if _active_tape is not None:
        def back(a=a, out=out):
            _accum(a, out.grad * (2.0 * a.data), True)
        _record(out, back)
    return out


def sqrt(a):
    # Zero is admitted (norm of a zero vector); its derivative is unbounded.
    if np.any(a.data < 0.0):
        raise DomainError("sqrt requires non-negative inputs")
    out = _out(np.sqrt(a.data), "sqrt")
    if _active_tape is not None:
        def back(a=a, out=out):
            with np.errstate(divide="ignore"):
                _accum(a, out.grad * (0.5 / out.data), True)
        _record(out, back)
    return out


# ---------------------------------------------------------------------------
# reductions


def _check_axis(a, axis):
    if axis is not None and not (0 <= axis < a.data.ndim):
        raise ShapeError(f"invalid axis {axis} for rank {a.data.ndim}")


def sum(a, axis=None):
    _check_axis(a, axis)
    out = _out(a.data.sum(axis=axis), "sum")
    if _active_tape is not None:
        if axis is None:
            def back(a=a, out=out):
                _accum(a, np.full(a.data.shape, out.grad.item()), True)
        else:
            def back(a=a, axis=axis, out=out):
                g = np.broadcast_to(np.expand_dims(out.grad, axis), a.data.shape)
                _accum(a, g, False)
        _record(out, back)
    return out


def mean(a, axis=None):
    _check_axis(a, axis)
    n = a.data.size if axis is None else a.data.shape[axis]
    out = _out(a.data.mean(axis=axis), "mean")
    if _active_tape is not None:
        inv = 1.0 / n
        if axis is None:
            def back(a=a, inv=inv, out=out):
                _accum(a, np.full(a.data.shape, out.grad.item() * inv), True)
        else:
            def back(a=a, axis=axis, inv=inv, out=out):
                g = np.broadcast_to(np.expand_dims(out.grad * inv, axis), a.data.shape)
                _accum(a, g, False)
        _record(out, back)
    return out


# ---------------------------------------------------------------------------
# shape ops


def concat(parts, axis):
    if not parts:
        raise ShapeError("concat of zero parts")
    nd = parts[0].data.ndim
    if not (0 <= axis < nd):
        raise ShapeError(f"invalid axis {axis} for rank {nd}")
    ref = list(parts[0].data.shape)
    for p in parts[1:]:
        if p.data.ndim != nd:
            raise ShapeError("concat: ranks differ")
        s = list(p.data.shape)
        s[axis] = ref[axis]
        if s != ref:
            raise ShapeError(f"concat: non-axis dims differ, {p.data.shape} vs {tuple(ref)}")
    out = _out(np.concatenate([p.data for p in parts], axis=axis), "concat")
    if _active_tape is not None:
        sizes = [p.data.shape[axis] for p in parts]
        def back(parts=tuple(parts), sizes=sizes, axis=axis, out=out):
            og = out.grad
            off = 0
            for p, k in zip(parts, sizes):
                sl = [np.s_[:]] * og.ndim
                sl[axis] = np.s_[off:off + k]
                _accum(p, og[tuple(sl)], False)
                off += k
        _record(out, back)
    return out


def slice_axis(a, axis, start, stop):
    """Contiguous range along one axis; the adjoint-compatible inverse of concat."""
    if not (0 <= axis < a.data.ndim):
        raise ShapeError(f"invalid axis {axis} for rank {a.data.ndim}")
    dim = a.data.shape[axis]
    if not (0 <= start < stop <= dim):
        raise ShapeError(f"slice range [{start}, {stop}) out of bounds for dim {dim}")
    sl = [np.s_[:]] * a.data.ndim
    sl[axis] = np.s_[start:stop]
    sl = tuple(sl)
    out = _out(a.data[sl], "slice")
    if _active_tape is not None:
        def back(a=a, sl=sl, out=out):
            g = np.zeros(a.data.shape)
            g[sl] = out.grad
            _accum(a, g, True)
        _record(out, back)
    return out


def transpose(a):
    if a.data.ndim != 2:
        raise ShapeError(f"transpose needs a matrix, got rank {a.data.ndim}")
    out = _out(a.data.T, "transpose")
    if _active_tape is not None:
        def back(a=a, out=out):
            _accum(a, np.ascontiguousarray(out.grad.T), True)
        _record(out, back)
    return out


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b):
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError("matmul needs matrices")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: inner dims differ, {a.data.shape} x {b.data.shape}")
    out = _out(a.data @ b.data, "matmul")
    if _active_tape is not None:
        def back(a=a, b=b, out=out):
            og = out.grad
            _accum(a, og @ b.data.T, True)
            _accum(b, a.data.T @ og, True)
        _record(out, back)
    return out


def matmul_t(a, b):
    """a @ bᵀ without materializing the transpose (the affine-layer hot path)."""
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError("matmul_t needs matrices")
    if a.data.shape[1] != b.data.shape[1]:
        raise ShapeError(f"matmul_t: inner dims differ, {a.data.shape} x {b.data.shape}ᵀ")
    out = _out(a.data @ b.data.T, "matmul_t")
    if _active_tape is not None:
        def back(a=a, b=b, out=out):
            og = out.grad
            _accum(a, og @ b.data, True)
            _accum(b, og.T @ a.data, True)
        _record(out, back)
    return out


def bias_add(m, v):
    """Add a length-n vector to every row of an [r, n] matrix."""
    if m.data.ndim != 2 or v.data.ndim != 1 or m.data.shape[1] != v.data.shape[0]:
        raise ShapeError(f"bias_add: shapes {m.data.shape} and {v.data.shape} do not fit")
    out = _out(m.data + v.data, "bias_add")
    if _active_tape is not None:
        def back(m=m, v=v, out=out):
            og = out.grad
            _accum(m, og, False)
            _accum(v, og.sum(axis=0), True)
        _record(out, back)
    return out
