"""Dense float64 tensors with reverse-mode differentiation.

Every op records its parents and a closure mapping the output gradient to
parent gradients. ``backward`` walks the recorded graph in reverse
topological order. Broadcasting follows numpy; gradients are summed back to
the operand shape.
"""

from __future__ import annotations

import contextlib
import contextvars

import numpy as np

_grad_enabled = contextvars.ContextVar("grad_enabled", default=True)


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording a graph (safe for concurrent inference)."""
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


def is_grad_enabled() -> bool:
    return _grad_enabled.get()


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # operator sugar
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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)

    def backward(self):
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents, backward_fn) -> Tensor:
    out = Tensor(data)
    if _grad_enabled.get() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff > 0:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def bw(g):
        return (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * out / b.data, b.shape),
        )

    return _result(out, (a, b), bw)


def power(a, p: float) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        return (g * p * a.data ** (p - 1),)

    return _result(a.data**p, (a,), bw)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)

    def bw(g):
        return (g * out,)

    return _result(out, (a,), bw)


def log(a) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        return (g / a.data,)

    return _result(np.log(a.data), (a,), bw)


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0

    def bw(g):
        return (g * mask,)

    return _result(np.where(mask, a.data, 0.0), (a,), bw)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = np.empty_like(a.data)
    pos = a.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a.data[pos]))
    ez = np.exp(a.data[~pos])
    out[~pos] = ez / (1.0 + ez)

    def bw(g):
        return (g * out * (1.0 - out),)

    return _result(out, (a,), bw)


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp values; gradient is zero where the clamp is active."""
    a = as_tensor(a)
    mask = (a.data >= lo) & (a.data <= hi)

    def bw(g):
        return (g * mask,)

    return _result(np.clip(a.data, lo, hi), (a,), bw)


# ---------------------------------------------------------------- reductions


def sum(a, axis=None, keepdims=False) -> Tensor:  # noqa: A001
    a = as_tensor(a)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(a.data.sum(axis=axis, keepdims=keepdims), (a,), bw)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return sum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def softmax(a, axis=-1) -> Tensor:
    """Row-max stabilized softmax along ``axis``."""
    a = as_tensor(a)
    out = a.data - a.data.max(axis=axis, keepdims=True)
    np.exp(out, out=out)
    out /= out.sum(axis=axis, keepdims=True)

    def bw(g):
        gx = g * out
        gx -= out * gx.sum(axis=axis, keepdims=True)
        return (gx,)

    return _result(out, (a,), bw)


def softmax_rows(a) -> Tensor:
    return softmax(a, axis=-1)


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs >=2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    if b.ndim == 2 and a.ndim > 2:
        # (..., k) @ (k, m) as a single 2-D product
        a2 = a.data.reshape(-1, a.shape[-1])

        def bw_flat(g):
            g2 = g.reshape(-1, g.shape[-1])
            return (g2 @ b.data.T).reshape(a.shape), a2.T @ g2

        return _result((a2 @ b.data).reshape(*a.shape[:-1], b.shape[-1]), (a, b), bw_flat)

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result(a.data @ b.data, (a, b), bw)


# ---------------------------------------------------------------- shape ops


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        return (g.reshape(a.shape),)

    return _result(a.data.reshape(shape), (a,), bw)


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(range(a.ndim))[::-1]
    inverse = np.argsort(axes)

    def bw(g):
        return (np.transpose(g, inverse),)

    return _result(np.transpose(a.data, axes), (a,), bw)


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    axes = list(range(as_tensor(a).ndim))
    axes[ax1], axes[ax2] = axes[ax2], axes[ax1]
    return transpose(a, tuple(axes))


def concat(tensors, axis=-1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bw)


def index(a, key) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, key, g)
        return (full,)

    return _result(a.data[key], (a,), bw)


def _row_index(idx, x):
    idx = np.asarray(idx, dtype=np.intp)
    if idx.ndim == 1:
        return idx
    if x.ndim != 3 or idx.shape[0] != x.shape[0]:
        raise ValueError(f"batched row index {idx.shape} does not fit tensor {x.shape}")
    return idx


def gather_rows(x, idx) -> Tensor:
    """Select rows along the second-to-last axis.

    ``idx`` is 1-D (same rows for every batch entry) or 2-D ``(B, m)`` for a
    ``(B, n, d)`` tensor.
    """
    x = as_tensor(x)
    idx = _row_index(idx, x.data)
    if idx.ndim == 1:
        out = x.data[..., idx, :]
    else:
        out = np.take_along_axis(x.data, idx[:, :, None], axis=1)

    def bw(g):
        full = np.zeros_like(x.data)
        if idx.ndim == 1:
            np.add.at(full, (Ellipsis, idx, slice(None)), g)
        else:
            b = np.arange(idx.shape[0])[:, None]
            np.add.at(full, (b, idx), g)
        return (full,)

    return _result(out, (x,), bw)


def scatter_add_rows(x, idx, upd) -> Tensor:
    """Return ``x`` with ``upd`` rows added at row positions ``idx``."""
    x, upd = as_tensor(x), as_tensor(upd)
    idx = _row_index(idx, x.data)
    out = x.data.copy()
    if idx.ndim == 1:
        np.add.at(out, (Ellipsis, idx, slice(None)), upd.data)
    else:
        b = np.arange(idx.shape[0])[:, None]
        np.add.at(out, (b, idx), upd.data)

    def bw(g):
        if idx.ndim == 1:
            gu = g[..., idx, :]
        else:
            gu = np.take_along_axis(g, idx[:, :, None], axis=1)
        return g, _unbroadcast(gu, upd.shape)

    return _result(out, (x, upd), bw)


# ---------------------------------------------------------------- backward


def _topo_order(root: Tensor):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    Leaf gradients accumulate across calls; callers zero them explicitly.
    Intermediate gradients are released after use.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor requiring grad")
    if not np.isfinite(loss.data).all():
        raise FloatingPointError("non-finite loss")
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            if not np.isfinite(node.grad).all():
                raise FloatingPointError(f"non-finite gradient for {node.name or node}")
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
