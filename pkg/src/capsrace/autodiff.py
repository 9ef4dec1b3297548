"""A small tape-free reverse-mode autodiff over numpy arrays.

Each :class:`Tensor` remembers its parents and a closure that pushes its
gradient back to them. Only the operations the policy and critic networks
need are provided.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class NumericError(ArithmeticError):
    def __init__(self, message: str, where: str | None = None):
        self.where = where
        super().__init__(f"{where}: {message}" if where else message)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, parents=(), backward=None, name=None):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = parents
        self._backward = backward
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, name={self.name})"

    def backward(self, grad=None):
        if grad is None:
            grad = np.ones_like(self.data)
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self.grad = grad
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                if node._parents:
                    # interior gradients are not needed after propagation
                    node.grad = None if node is not self else node.grad

    def _accum(self, g):
        if not self.requires_grad:
            return
        self.grad = g if self.grad is None else self.grad + g

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __neg__ = lambda self: mul(self, -1.0)
    __matmul__ = lambda self, o: matmul(self, o)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def _pair(a, b):
    """Promote operands to tensors; bare scalars take the dtype of the other side."""
    if not isinstance(a, Tensor) and isinstance(b, Tensor):
        a = Tensor(np.asarray(a, dtype=b.data.dtype))
    if not isinstance(b, Tensor) and isinstance(a, Tensor):
        b = Tensor(np.asarray(b, dtype=a.data.dtype))
    return as_tensor(a), as_tensor(b)


def _make(data, parents, backward):
    parents = tuple(p for p in parents if isinstance(p, Tensor))
    if any(p.requires_grad for p in parents):
        return Tensor(data, True, parents, backward)
    return Tensor(data)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def add(a, b):
    a, b = _pair(a, b)

    def backward(g):
        a._accum(_unbroadcast(g, a.shape))
        b._accum(_unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), backward)


def sub(a, b):
    a, b = _pair(a, b)

    def backward(g):
        a._accum(_unbroadcast(g, a.shape))
        b._accum(_unbroadcast(-g, b.shape))

    return _make(a.data - b.data, (a, b), backward)


def mul(a, b):
    a, b = _pair(a, b)

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), backward)


def matmul(a, b):
    def backward(g):
        if a.requires_grad:
            a._accum(g @ b.data.T)
        if b.requires_grad:
            b._accum(a.data.T @ g)

    return _make(a.data @ b.data, (a, b), backward)


def relu(x):
    mask = x.data > 0

    def backward(g):
        x._accum(g * mask)

    return _make(np.where(mask, x.data, 0).astype(x.data.dtype), (x,), backward)


def tanh(x):
    y = np.tanh(x.data)

    def backward(g):
        x._accum(g * (1 - y * y))

    return _make(y, (x,), backward)


def exp(x):
    y = np.exp(x.data)

    def backward(g):
        x._accum(g * y)

    return _make(y, (x,), backward)


def log(x):
    def backward(g):
        x._accum(g / x.data)

    return _make(np.log(x.data), (x,), backward)


def softplus(x):
    y = np.logaddexp(0, x.data).astype(x.data.dtype)

    def backward(g):
        sig = np.exp(x.data - y)  # logistic(x)
        x._accum(g * sig)

    return _make(y, (x,), backward)


def square(x):
    def backward(g):
        x._accum(g * 2 * x.data)

    return _make(x.data * x.data, (x,), backward)


def clip(x, lo, hi):
    """Hard clamp; gradient passes only where the input is inside [lo, hi]."""
    inside = (x.data >= lo) & (x.data <= hi)

    def backward(g):
        x._accum(g * inside)

    return _make(np.clip(x.data, lo, hi), (x,), backward)


def minimum(a, b):
    pick_a = a.data <= b.data

    def backward(g):
        a._accum(g * pick_a)
        b._accum(g * ~pick_a)

    return _make(np.where(pick_a, a.data, b.data), (a, b), backward)


def tsum(x, axis=None, keepdims=False):
    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        x._accum(np.broadcast_to(g, x.shape).astype(x.data.dtype, copy=True))

    return _make(np.sum(x.data, axis=axis, keepdims=keepdims), (x,), backward)


def mean(x, axis=None):
    n = x.data.size if axis is None else x.data.shape[axis]
    return mul(tsum(x, axis), 1.0 / n)


def reshape(x, shape):
    def backward(g):
        x._accum(g.reshape(x.shape))

    return _make(x.data.reshape(shape), (x,), backward)


def concat(xs, axis=-1):
    sizes = [t.shape[axis] for t in xs]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        for t, piece in zip(xs, np.split(g, splits, axis=axis)):
            t._accum(piece)

    return _make(np.concatenate([t.data for t in xs], axis=axis), tuple(xs), backward)


def slice_cols(x, start, stop):
    def backward(g):
        full = np.zeros_like(x.data)
        full[..., start:stop] = g
        x._accum(full)

    return _make(x.data[..., start:stop], (x,), backward)


def row_norm(x):
    """Euclidean norm over the last axis; the gradient at a zero vector is taken as 0."""
    n = np.sqrt(np.sum(x.data * x.data, axis=-1))

    def backward(g):
        safe = np.where(n > 0, n, 1)
        x._accum((g / safe * (n > 0))[..., None] * x.data)

    return _make(n, (x,), backward)


def conv2d(x, w, b, stride=1):
    """Valid NHWC convolution; ``w`` has shape (kh, kw, c_in, c_out)."""
    n, h, wd, c = x.shape
    kh, kw, cin, cout = w.shape
    if cin != c:
        raise ValueError(f"conv expects {cin} input channels, got {c}")
    oh = (h - kh) // stride + 1
    ow = (wd - kw) // stride + 1
    if oh < 1 or ow < 1:
        raise ValueError(f"conv kernel {kh}x{kw}/{stride} does not fit input {h}x{wd}")
    win = sliding_window_view(x.data, (kh, kw), axis=(1, 2))[:, ::stride, ::stride][:, :oh, :ow]
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(n * oh * ow, kh * kw * c)
    w2 = w.data.reshape(kh * kw * c, cout)
    out = (cols @ w2 + b.data).reshape(n, oh, ow, cout)

    def backward(g):
        g2 = g.reshape(n * oh * ow, cout)
        if w.requires_grad:
            w._accum((cols.T @ g2).reshape(w.shape))
        if b.requires_grad:
            b._accum(g2.sum(axis=0))
        if x.requires_grad:
            dcols = (g2 @ w2.T).reshape(n, oh, ow, kh, kw, c)
            dx = np.zeros_like(x.data)
            for i in range(kh):
                for j in range(kw):
                    dx[:, i:i + stride * oh:stride, j:j + stride * ow:stride, :] += dcols[:, :, :, i, j, :]
            x._accum(dx)

    return _make(out, (x, w, b), backward)


def dense(x, w, b):
    return add(matmul(x, w), b)


def check_finite(t: Tensor, where: str) -> Tensor:
    if not np.all(np.isfinite(t.data)):
        raise NumericError("non-finite activation", where)
    return t
