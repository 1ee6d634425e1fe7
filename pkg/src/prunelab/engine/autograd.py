"""Tape-free reverse-mode autodiff over numpy float64 arrays.

Each op returns a new :class:`Tensor` that remembers its parents and a
closure pushing the upstream gradient back to them.  ``backward`` walks the
graph in reverse topological order.  Nodes built from inputs that do not
require gradients carry no closure, so pure inference builds no graph.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float64


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order, seen = [], set()
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
        self.grad = np.asarray(grad, dtype=DTYPE)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def _accumulate(self, g):
        # grads are never mutated in place, so sharing arrays is safe
        if self.grad is None:
            self.grad = g
        else:
            self.grad = self.grad + g

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __neg__ = lambda self: mul(self, -1.0)
    __matmul__ = lambda self, o: matmul(self, o)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents, backward):
    parents = tuple(p for p in parents if p.requires_grad)
    if not parents:
        return Tensor(data)
    return Tensor(data, True, parents, backward)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _node(a.data + b.data, (a, b), backward)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    return _node(a.data - b.data, (a, b), backward)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _node(a.data * b.data, (a, b), backward)


def matmul(a, b):
    """2-D matrix product."""
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    return _node(a.data @ b.data, (a, b), backward)


def absolute(a):
    def backward(g):
        a._accumulate(g * np.sign(a.data))

    return _node(np.abs(a.data), (a,), backward)


def relu(a):
    def backward(g):
        a._accumulate(g * (a.data > 0))

    return _node(np.maximum(a.data, 0.0), (a,), backward)


def reshape(a, shape):
    def backward(g):
        a._accumulate(g.reshape(a.shape))

    return _node(a.data.reshape(shape), (a,), backward)


def transpose(a, axes):
    inverse = np.argsort(axes)

    def backward(g):
        a._accumulate(g.transpose(inverse))

    return _node(a.data.transpose(axes), (a,), backward)


def sum_all(a):
    def backward(g):
        a._accumulate(np.broadcast_to(g, a.shape).copy())

    return _node(a.data.sum(), (a,), backward)


def mean_all(a):
    n = a.data.size

    def backward(g):
        a._accumulate(np.full(a.shape, g / n))

    return _node(a.data.mean(), (a,), backward)


def where(cond, a, b):
    """Elementwise select with a constant boolean condition."""
    a, b = as_tensor(a), as_tensor(b)
    cond = np.asarray(cond, dtype=bool)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(np.where(cond, g, 0.0), a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(np.where(cond, 0.0, g), b.shape))

    return _node(np.where(cond, a.data, b.data), (a, b), backward)


def cross_entropy(logits, labels):
    """Mean softmax cross-entropy of ``[B, C]`` logits against integer labels."""
    labels = np.asarray(labels, dtype=np.int64)
    z = logits.data
    shifted = z - z.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(len(labels))
    loss = float(np.mean(logsumexp - shifted[rows, labels]))

    def backward(g):
        p = np.exp(shifted - logsumexp[:, None])
        p[rows, labels] -= 1.0
        logits._accumulate(p * (g / len(labels)))

    return _node(np.asarray(loss), (logits,), backward)


def _pad(x, padding):
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def _windows(x, kh, kw, stride):
    # [B, C, Ho, Wo, kh, kw] strided view, no copy
    return sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]


def _fold(cols, x_shape, kh, kw, stride, ho, wo):
    """Scatter-add window gradients ``[B, C, Ho, Wo, kh, kw]`` back onto the input."""
    out = np.zeros(x_shape, dtype=DTYPE)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += cols[..., i, j]
    return out


def conv2d(x, w, stride=1, padding=0):
    """Cross-correlation of ``[B, C, H, W]`` input with ``[O, C, kh, kw]`` kernels."""
    x, w = as_tensor(x), as_tensor(w)
    o, c, kh, kw = w.shape
    xp = _pad(x.data, padding)
    win = _windows(xp, kh, kw, stride)
    b, _, ho, wo = win.shape[:4]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b * ho * wo, c * kh * kw)
    wmat = w.data.reshape(o, -1)
    out = (cols @ wmat.T).reshape(b, ho, wo, o).transpose(0, 3, 1, 2)

    def backward(g):
        gm = g.transpose(0, 2, 3, 1).reshape(b * ho * wo, o)
        if w.requires_grad:
            w._accumulate((gm.T @ cols).reshape(w.shape))
        if x.requires_grad:
            dcols = (gm @ wmat).reshape(b, ho, wo, c, kh, kw).transpose(0, 3, 1, 2, 4, 5)
            dx = _fold(dcols, xp.shape, kh, kw, stride, ho, wo)
            if padding:
                dx = dx[:, :, padding:-padding, padding:-padding]
            x._accumulate(dx)

    return _node(np.ascontiguousarray(out), (x, w), backward)


def avg_pool2d(x, kernel, stride):
    win = _windows(x.data, kernel, kernel, stride)
    ho, wo = win.shape[2:4]
    out = win.mean(axis=(4, 5))

    def backward(g):
        spread = np.broadcast_to(g[..., None, None] / (kernel * kernel), g.shape + (kernel, kernel))
        x._accumulate(_fold(spread, x.shape, kernel, kernel, stride, ho, wo))

    return _node(out, (x,), backward)
