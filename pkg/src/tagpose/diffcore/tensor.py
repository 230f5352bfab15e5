"""Reverse-mode automatic differentiation over float64 numpy arrays.

Every differentiable quantity in the package is a :class:`Value`.  Operations
record their parents and a backward closure on creation; :func:`backward`
walks the resulting tape once in reverse topological order.
"""
from __future__ import annotations

import contextlib

import numpy as np

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording a tape (inference)."""
    global _GRAD_ENABLED
    previous, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


class NonFiniteError(FloatingPointError):
    """Raised when a loss handed to :func:`backward` is not finite."""


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    ndim_extra = g.ndim - len(shape)
    if ndim_extra > 0:
        g = g.sum(axis=tuple(range(ndim_extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


class Value:
    """An array on the tape.

    Attributes
    ----------
    data : np.ndarray
        Float64 payload.
    grad : np.ndarray
        Accumulated gradient, same shape as ``data`` (zeros until a backward
        pass reaches this node).
    op : str
        Name of the operation that produced the value (``"leaf"`` for inputs).
    """

    __slots__ = ("data", "_grad", "_parents", "_backward", "op", "name", "requires_grad")
    __array_priority__ = 100

    def __init__(self, data, parents=(), op="leaf", name=None, requires_grad=None):
        self.data = np.asarray(data, dtype=np.float64)
        self._grad = None
        self._parents = tuple(parents)
        self._backward = None
        self.op = op
        self.name = name
        if requires_grad is None:
            requires_grad = any(p.requires_grad for p in self._parents) if parents else True
        self.requires_grad = bool(requires_grad)

    # -- bookkeeping -------------------------------------------------------
    @property
    def grad(self):
        if self._grad is None:
            self._grad = np.zeros_like(self.data)
        return self._grad

    @grad.setter
    def grad(self, value):
        self._grad = np.asarray(value, dtype=np.float64)

    def zero_grad(self):
        self._grad = None

    def _accum(self, g):
        if not self.requires_grad:
            return
        if self._grad is None:
            self._grad = np.array(g, dtype=np.float64, copy=True).reshape(self.data.shape)
        else:
            self._grad += g

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def detach(self):
        return Value(self.data.copy(), requires_grad=False, name=self.name)

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Value{label}(shape={self.shape}, op={self.op})"

    def __len__(self):
        return len(self.data)

    # -- arithmetic --------------------------------------------------------
    def __add__(self, other):
        other = as_value(other)
        out = _make(self.data + other.data, (self, other), "add")
        if out.requires_grad:
            def _bw(g):
                self._accum(_unbroadcast(g, self.shape))
                other._accum(_unbroadcast(g, other.shape))
            out._backward = _bw
        return out

    __radd__ = __add__

    def __neg__(self):
        out = _make(-self.data, (self,), "neg")
        if out.requires_grad:
            out._backward = lambda g: self._accum(-g)
        return out

    def __sub__(self, other):
        other = as_value(other)
        out = _make(self.data - other.data, (self, other), "sub")
        if out.requires_grad:
            def _bw(g):
                self._accum(_unbroadcast(g, self.shape))
                other._accum(_unbroadcast(-g, other.shape))
            out._backward = _bw
        return out

    def __rsub__(self, other):
        return as_value(other) - self

    def __mul__(self, other):
        other = as_value(other)
        out = _make(self.data * other.data, (self, other), "mul")
        if out.requires_grad:
            def _bw(g):
                if self.requires_grad:
                    self._accum(_unbroadcast(g * other.data, self.shape))
                if other.requires_grad:
                    other._accum(_unbroadcast(g * self.data, other.shape))
            out._backward = _bw
        return out

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_value(other)
        out = _make(self.data / other.data, (self, other), "div")
        if out.requires_grad:
            def _bw(g):
                if self.requires_grad:
                    self._accum(_unbroadcast(g / other.data, self.shape))
                if other.requires_grad:
                    other._accum(_unbroadcast(-g * out.data / other.data, other.shape))
            out._backward = _bw
        return out

    def __rtruediv__(self, other):
        return as_value(other) / self

    def __pow__(self, exponent):
        if isinstance(exponent, Value):
            raise TypeError("only constant exponents are supported")
        k = float(exponent)
        out = _make(self.data ** k, (self,), f"pow{k:g}")
        if out.requires_grad:
            out._backward = lambda g: self._accum(g * k * self.data ** (k - 1.0))
        return out

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(as_value(other), self)

    def __getitem__(self, idx):
        out = _make(self.data[idx], (self,), "getitem")
        if out.requires_grad:
            basic = _is_basic_index(idx)

            def _bw(g):
                full = np.zeros_like(self.data)
                if basic:
                    full[idx] = g
                else:
                    np.add.at(full, idx, g)
                self._accum(full)
            out._backward = _bw
        return out

    # -- reductions and shape ---------------------------------------------
    def sum(self, axis=None, keepdims=False):
        out = _make(self.data.sum(axis=axis, keepdims=keepdims), (self,), "sum")
        if out.requires_grad:
            def _bw(g):
                if axis is not None and not keepdims:
                    g = np.expand_dims(g, axis)
                self._accum(np.broadcast_to(g, self.shape))
            out._backward = _bw
        return out

    def max(self, axis, keepdims=False):
        """Maximum along one axis; the gradient goes to the first maximal entry."""
        idx = np.expand_dims(self.data.argmax(axis=axis), axis)
        data = np.take_along_axis(self.data, idx, axis=axis)
        out = _make(data if keepdims else np.squeeze(data, axis), (self,), "max")
        if out.requires_grad:
            def _bw(g):
                full = np.zeros_like(self.data)
                np.put_along_axis(full, idx, g if keepdims else np.expand_dims(g, axis), axis=axis)
                self._accum(full)
            out._backward = _bw
        return out

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else np.prod([self.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        out = _make(self.data.reshape(shape), (self,), "reshape")
        if out.requires_grad:
            out._backward = lambda g: self._accum(g.reshape(self.shape))
        return out

    def transpose(self, *axes):
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        elif len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inv = np.argsort(axes)
        out = _make(self.data.transpose(axes), (self,), "transpose")
        if out.requires_grad:
            out._backward = lambda g: self._accum(g.transpose(inv))
        return out

    def swapaxes(self, a, b):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return self.transpose(axes)

    @property
    def T(self):
        return self.swapaxes(-1, -2)

    # -- elementwise functions --------------------------------------------
    def exp(self):
        out = _make(np.exp(self.data), (self,), "exp")
        if out.requires_grad:
            out._backward = lambda g: self._accum(g * out.data)
        return out

    def log(self):
        out = _make(np.log(self.data), (self,), "log")
        if out.requires_grad:
            out._backward = lambda g: self._accum(g / self.data)
        return out

    def sqrt(self):
        out = _make(np.sqrt(self.data), (self,), "sqrt")
        if out.requires_grad:
            out._backward = lambda g: self._accum(g * 0.5 / out.data)
        return out

    def sin(self):
        out = _make(np.sin(self.data), (self,), "sin")
        if out.requires_grad:
            out._backward = lambda g: self._accum(g * np.cos(self.data))
        return out

    def cos(self):
        out = _make(np.cos(self.data), (self,), "cos")
        if out.requires_grad:
            out._backward = lambda g: self._accum(-g * np.sin(self.data))
        return out

    def tanh(self):
        out = _make(np.tanh(self.data), (self,), "tanh")
        if out.requires_grad:
            out._backward = lambda g: self._accum(g * (1.0 - out.data ** 2))
        return out

    def relu(self):
        out = _make(np.maximum(self.data, 0.0), (self,), "relu")
        if out.requires_grad:
            out._backward = lambda g: self._accum(g * (self.data > 0))
        return out

    def sigmoid(self):
        s = 0.5 * (1.0 + np.tanh(0.5 * self.data))
        out = _make(s, (self,), "sigmoid")
        if out.requires_grad:
            out._backward = lambda g: self._accum(g * s * (1.0 - s))
        return out

    def softplus(self):
        x = self.data
        out = _make(np.logaddexp(0.0, x), (self,), "softplus")
        if out.requires_grad:
            out._backward = lambda g: self._accum(g * 0.5 * (1.0 + np.tanh(0.5 * x)))
        return out


def _is_basic_index(idx):
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (slice, int, np.integer)) or i is None or i is Ellipsis for i in items)


def _make(data, parents, op):
    if not _GRAD_ENABLED:
        return Value(data, (), op, requires_grad=False)
    return Value(data, parents, op)


def as_value(x):
    """Wrap ``x`` as a constant :class:`Value` unless it already is one."""
    if isinstance(x, Value):
        return x
    return Value(x, requires_grad=False, op="const")


def matmul(a, b):
    a, b = as_value(a), as_value(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands must be at least 2-D")
    out = _make(a.data @ b.data, (a, b), "matmul")
    if out.requires_grad:
        def _bw(g):
            if a.requires_grad:
                a._accum(_unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))
        out._backward = _bw
    return out


def concat(values, axis=0):
    values = [as_value(v) for v in values]
    out = _make(np.concatenate([v.data for v in values], axis=axis), values, "concat")
    if out.requires_grad:
        bounds = np.cumsum([0] + [v.shape[axis] for v in values])

        def _bw(g):
            for v, lo, hi in zip(values, bounds[:-1], bounds[1:]):
                if v.requires_grad:
                    sl = [slice(None)] * g.ndim
                    sl[axis] = slice(lo, hi)
                    v._accum(g[tuple(sl)])
        out._backward = _bw
    return out


def stack(values, axis=0):
    values = [as_value(v) for v in values]
    out = _make(np.stack([v.data for v in values], axis=axis), values, "stack")
    if out.requires_grad:
        def _bw(g):
            for i, v in enumerate(values):
                if v.requires_grad:
                    v._accum(np.take(g, i, axis=axis))
        out._backward = _bw
    return out


def pad(x, pad_width):
    """Zero-pad ``x``; ``pad_width`` follows :func:`numpy.pad`."""
    x = as_value(x)
    out = _make(np.pad(x.data, pad_width), (x,), "pad")
    if out.requires_grad:
        sl = tuple(slice(lo, lo + n) for (lo, _), n in zip(pad_width, x.shape))
        out._backward = lambda g: x._accum(g[sl])
    return out


def where(cond, a, b):
    """Select from ``a`` where the constant boolean ``cond`` holds, else ``b``."""
    a, b = as_value(a), as_value(b)
    cond = np.asarray(cond, dtype=bool)
    out = _make(np.where(cond, a.data, b.data), (a, b), "where")
    if out.requires_grad:
        def _bw(g):
            if a.requires_grad:
                a._accum(_unbroadcast(np.where(cond, g, 0.0), a.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(np.where(cond, 0.0, g), b.shape))
        out._backward = _bw
    return out


def nearest_rotation(m):
    """Project a batch of 3x3 matrices onto SO(3).

    Uses the SVD ``M = U S V^T`` and returns ``U diag(1, 1, d) V^T`` with
    ``d = det(U V^T)``.  The backward pass is the derivative of the special
    polar factor; it is undefined when two sign-corrected singular values sum
    to zero.
    """
    m = as_value(m)
    u, s, vt = np.linalg.svd(m.data)
    d = np.sign(np.linalg.det(u @ vt))
    d[d == 0] = 1.0
    sign = np.ones(s.shape)
    sign[..., -1] = d
    u = u * sign[..., None, :]
    r = u @ vt
    out = _make(r, (m,), "nearest_rotation")
    if out.requires_grad:
        sd = s * sign
        denom = sd[..., :, None] + sd[..., None, :]

        def _bw(g):
            v = np.swapaxes(vt, -1, -2)
            gh = np.swapaxes(u, -1, -2) @ g @ v
            ga = (gh - np.swapaxes(gh, -1, -2)) / denom
            m._accum(u @ ga @ vt)
        out._backward = _bw
    return out


def topological_order(root):
    order, seen = [], set()
    stack_ = [(root, False)]
    while stack_:
        node, done = stack_.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack_.append((p, False))
    return order


def backward(loss, params=None):
    """Populate ``.grad`` on every leaf reachable from the scalar ``loss``.

    If ``params`` is given, their gradients are reset first, so parameters
    not reachable from ``loss`` end up holding zeros.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    order = topological_order(loss)
    if not np.isfinite(loss.data).all():
        for node in order:
            if not np.isfinite(node.data).all():
                label = node.name or node.op
                raise NonFiniteError(f"non-finite loss; first non-finite tape node: {label} {node.shape}")
        raise NonFiniteError("non-finite loss")
    if params is not None:
        for p in params:
            p.grad = np.zeros_like(p.data)
    for node in order:
        if node._backward is not None:
            node._grad = None
    loss._grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node._grad is not None:
            node._backward(node._grad)
    return loss


def release_tape(root):
    """Drop the backward closures and parent links below ``root``.

    Closures reference their outputs, so a finished tape is cyclic garbage;
    releasing it frees the intermediate arrays immediately.
    """
    for node in topological_order(root):
        if node._parents:
            node._backward = None
            node._parents = ()
            node._grad = None
