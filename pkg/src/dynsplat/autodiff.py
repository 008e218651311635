"""Minimal reverse-mode automatic differentiation over float64 NumPy arrays.

Every differentiable quantity in the engine is a :class:`Tensor` holding an
ndarray plus an optional backward closure. Module-level functions (``exp``,
``matmul``, ``where``, ...) dispatch on input type: given plain ndarrays or
scalars they compute with NumPy directly, given at least one ``Tensor`` they
record the operation on the tape. That lets the geometry and model code be
written once and run both inside and outside the training graph.

The op set is deliberately small: elementwise arithmetic and transcendentals,
broadcasting-aware reductions, matmul, shape ops, fancy row gathers with their
adjoint ``segment_sum``, and ``custom`` for kernels that supply a hand-derived
vector-Jacobian product (the tile rasterizer and the SSIM blur use it).
"""

from __future__ import annotations

import contextlib

import numpy as np

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the context (inference paths)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` to undo NumPy broadcasting."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    """An ndarray with an optional place on the autodiff tape."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    # make ndarray <op> Tensor defer to the reflected Tensor ops instead of
    # broadcasting the Tensor as an object scalar
    __array_ufunc__ = None

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._vjp = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into ``.grad`` of every reachable tensor.

        ``grad`` seeds the output cotangent and defaults to ones (i.e. the
        tensor is treated as a sum). The graph is released as soon as the
        referencing tensors go out of scope; nothing here retains it.
        """
        if grad is None:
            grad = np.ones_like(self.data)
        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.asarray(grad, dtype=np.float64) + (0.0 if self.grad is None else self.grad)
        for node in reversed(topo):
            if node._vjp is not None and node.grad is not None:
                node._vjp(node.grad)

    # -- operator sugar -------------------------------------------------

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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, k):
        return power(self, k)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, *shape)

    def __repr__(self):
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"


def is_tensor(x):
    return isinstance(x, Tensor)


def data_of(x):
    """Raw ndarray view of a Tensor, ndarray, or scalar."""
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _tensorize(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _any_tensor(*xs):
    return any(isinstance(x, Tensor) for x in xs)


def _accum(t, g):
    if t.requires_grad:
        g = _unbroadcast(np.asarray(g, dtype=np.float64), t.data.shape)
        t.grad = g if t.grad is None else t.grad + g


def custom(data, parents, vjp):
    """Create a tape node from a hand-written vector-Jacobian product.

    Parameters
    ----------
    data : ndarray
        Forward result.
    parents : sequence of Tensor
        Inputs the node differentiates with respect to.
    vjp : callable
        Maps the output cotangent to a tuple of input cotangents aligned
        with ``parents`` (entries may be None).
    """
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)

        def _bw(g):
            grads = vjp(g)
            for p, gp in zip(out._parents, grads):
                if gp is not None:
                    _accum(p, gp)

        out._vjp = _bw
    return out


def _node(data, parents, vjp_pairs):
    """Internal: build a node whose vjp distributes ``g`` via per-parent maps."""
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)

        def _bw(g):
            for p, fn in zip(out._parents, vjp_pairs):
                if p.requires_grad and fn is not None:
                    _accum(p, fn(g))

        out._vjp = _bw
    return out


# -- elementwise binary ----------------------------------------------------


def add(a, b):
    if not _any_tensor(a, b):
        return np.add(a, b)
    a, b = _tensorize(a), _tensorize(b)
    return _node(a.data + b.data, (a, b), (lambda g: g, lambda g: g))


def sub(a, b):
    if not _any_tensor(a, b):
        return np.subtract(a, b)
    a, b = _tensorize(a), _tensorize(b)
    return _node(a.data - b.data, (a, b), (lambda g: g, lambda g: -g))


def mul(a, b):
    if not _any_tensor(a, b):
        return np.multiply(a, b)
    a, b = _tensorize(a), _tensorize(b)
    return _node(a.data * b.data, (a, b), (lambda g: g * b.data, lambda g: g * a.data))


def div(a, b):
    if not _any_tensor(a, b):
        return np.divide(a, b)
    a, b = _tensorize(a), _tensorize(b)
    return _node(
        a.data / b.data,
        (a, b),
        (lambda g: g / b.data, lambda g: -g * a.data / (b.data * b.data)),
    )


def power(a, k):
    """Elementwise a**k for a constant exponent k."""
    if not _any_tensor(a):
        return np.power(a, k)
    a = _tensorize(a)
    return _node(a.data**k, (a,), (lambda g: g * k * a.data ** (k - 1),))


def maximum(a, b):
    if not _any_tensor(a, b):
        return np.maximum(a, b)
    a, b = _tensorize(a), _tensorize(b)
    # ties route the gradient to the first argument
    pick_a = a.data >= b.data
    return _node(
        np.maximum(a.data, b.data),
        (a, b),
        (lambda g: g * pick_a, lambda g: g * ~pick_a),
    )


def minimum(a, b):
    if not _any_tensor(a, b):
        return np.minimum(a, b)
    a, b = _tensorize(a), _tensorize(b)
    pick_a = a.data <= b.data
    return _node(
        np.minimum(a.data, b.data),
        (a, b),
        (lambda g: g * pick_a, lambda g: g * ~pick_a),
    )


def clip(a, lo, hi):
    return minimum(maximum(a, lo), hi)


def where(cond, a, b):
    """Select ``a`` where ``cond`` (a plain boolean array) else ``b``.

    Both branches are evaluated by the caller, so NaN-safety of a branch must
    be arranged before calling (see the guarded forms in the geometry code);
    the gradient is exactly zero on the unselected branch.
    """
    cond = np.asarray(cond, dtype=bool)
    if not _any_tensor(a, b):
        return np.where(cond, a, b)
    a, b = _tensorize(a), _tensorize(b)
    return _node(
        np.where(cond, a.data, b.data),
        (a, b),
        (lambda g: g * cond, lambda g: g * ~cond),
    )


# -- elementwise unary -----------------------------------------------------


def exp(x):
    if not _any_tensor(x):
        return np.exp(x)
    x = _tensorize(x)
    y = np.exp(x.data)
    return _node(y, (x,), (lambda g: g * y,))


def log(x):
    if not _any_tensor(x):
        return np.log(x)
    x = _tensorize(x)
    return _node(np.log(x.data), (x,), (lambda g: g / x.data,))


def sqrt(x):
    if not _any_tensor(x):
        return np.sqrt(x)
    x = _tensorize(x)
    y = np.sqrt(x.data)
    return _node(y, (x,), (lambda g: g * 0.5 / y,))


def sin(x):
    if not _any_tensor(x):
        return np.sin(x)
    x = _tensorize(x)
    return _node(np.sin(x.data), (x,), (lambda g: g * np.cos(x.data),))


def cos(x):
    if not _any_tensor(x):
        return np.cos(x)
    x = _tensorize(x)
    return _node(np.cos(x.data), (x,), (lambda g: -g * np.sin(x.data),))


def sigmoid(x):
    if not _any_tensor(x):
        return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=np.float64)))
    x = _tensorize(x)
    y = 1.0 / (1.0 + np.exp(-x.data))
    return _node(y, (x,), (lambda g: g * y * (1.0 - y),))


def relu(x):
    if not _any_tensor(x):
        return np.maximum(x, 0.0)
    x = _tensorize(x)
    mask = x.data > 0
    return _node(x.data * mask, (x,), (lambda g: g * mask,))


def absolute(x):
    if not _any_tensor(x):
        return np.abs(x)
    x = _tensorize(x)
    s = np.sign(x.data)
    return _node(np.abs(x.data), (x,), (lambda g: g * s,))


# -- reductions -------------------------------------------------------------


def sum(x, axis=None, keepdims=False):  # noqa: A001 - mirrors np.sum on tensors
    if not _any_tensor(x):
        return np.sum(x, axis=axis, keepdims=keepdims)
    x = _tensorize(x)
    y = np.sum(x.data, axis=axis, keepdims=keepdims)

    def _bw(g):
        if axis is None:
            return np.broadcast_to(g, x.data.shape)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, x.data.shape)

    return _node(y, (x,), (_bw,))


def mean(x, axis=None, keepdims=False):
    if not _any_tensor(x):
        return np.mean(x, axis=axis, keepdims=keepdims)
    x = _tensorize(x)
    if axis is None:
        n = x.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = 1
        for ax in axes:
            n *= x.data.shape[ax]
    return sum(x, axis=axis, keepdims=keepdims) * (1.0 / n)


# -- linear algebra / shape --------------------------------------------------


def matmul(a, b):
    if not _any_tensor(a, b):
        return np.matmul(a, b)
    a, b = _tensorize(a), _tensorize(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ValueError("matmul operands must have ndim >= 2")
    return _node(
        np.matmul(a.data, b.data),
        (a, b),
        (
            lambda g: np.matmul(g, np.swapaxes(b.data, -1, -2)),
            lambda g: np.matmul(np.swapaxes(a.data, -1, -2), g),
        ),
    )


def reshape(x, *shape):
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    if not _any_tensor(x):
        return np.reshape(x, shape)
    x = _tensorize(x)
    return _node(x.data.reshape(shape), (x,), (lambda g: g.reshape(x.data.shape),))


def transpose(x, axes):
    if not _any_tensor(x):
        return np.transpose(x, axes)
    x = _tensorize(x)
    inv = np.argsort(axes)
    return _node(np.transpose(x.data, axes), (x,), (lambda g: np.transpose(g, inv),))


def swapaxes(x, a, b):
    if not _any_tensor(x):
        return np.swapaxes(x, a, b)
    x = _tensorize(x)
    return _node(np.swapaxes(x.data, a, b), (x,), (lambda g: np.swapaxes(g, a, b),))


def concatenate(xs, axis=0):
    if not _any_tensor(*xs):
        return np.concatenate(xs, axis=axis)
    xs = [_tensorize(x) for x in xs]
    sizes = [x.data.shape[axis] for x in xs]
    splits = np.cumsum(sizes)[:-1]

    data = np.concatenate([x.data for x in xs], axis=axis)
    out = Tensor(data)
    if _grad_enabled and any(x.requires_grad for x in xs):
        out.requires_grad = True
        out._parents = tuple(xs)

        def _bw(g):
            for x, gpart in zip(out._parents, np.split(g, splits, axis=axis)):
                _accum(x, gpart)

        out._vjp = _bw
    return out


def stack(xs, axis=0):
    if not _any_tensor(*xs):
        return np.stack(xs, axis=axis)
    xs = [_tensorize(x) for x in xs]
    data = np.stack([x.data for x in xs], axis=axis)
    out = Tensor(data)
    if _grad_enabled and any(x.requires_grad for x in xs):
        out.requires_grad = True
        out._parents = tuple(xs)

        def _bw(g):
            for i, x in enumerate(out._parents):
                _accum(x, np.take(g, i, axis=axis))

        out._vjp = _bw
    return out


def getitem(x, key):
    """Basic (non-repeating) indexing; use ``take`` for integer-array gathers."""
    if not _any_tensor(x):
        return np.asarray(x)[key]
    x = _tensorize(x)

    def _bw(g):
        gx = np.zeros_like(x.data)
        gx[key] += g
        return gx

    return _node(x.data[key], (x,), (_bw,))


def take(x, idx):
    """Gather rows: ``x[idx]`` for an integer array ``idx`` along axis 0."""
    idx = np.asarray(idx)
    if not _any_tensor(x):
        return np.asarray(x)[idx]
    x = _tensorize(x)

    def _bw(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return gx

    return _node(x.data[idx], (x,), (_bw,))


def segment_sum(x, seg, num):
    """Sum rows of ``x`` into ``num`` buckets given by index vector ``seg``.

    Adjoint of :func:`take`; uses unbuffered in-place accumulation so the
    result is deterministic.
    """
    seg = np.asarray(seg)
    if not _any_tensor(x):
        out = np.zeros((num,) + np.asarray(x).shape[1:], dtype=np.float64)
        np.add.at(out, seg, x)
        return out
    x = _tensorize(x)
    out = np.zeros((num,) + x.data.shape[1:], dtype=np.float64)
    np.add.at(out, seg, x.data)
    return _node(out, (x,), (lambda g: g[seg],))


# -- composites --------------------------------------------------------------


def softmax(x, axis=-1):
    """Numerically stable softmax along ``axis`` (max shift is detached)."""
    shift = np.max(data_of(x), axis=axis, keepdims=True)
    e = exp(sub(x, shift) if is_tensor(x) else x - shift)
    return div(e, sum(e, axis=axis, keepdims=True))


def zero_grads(params):
    for p in params:
        p.grad = None
