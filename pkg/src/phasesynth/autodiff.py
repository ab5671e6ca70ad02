"""Dense float64 tensors with reverse-mode automatic differentiation.

The graph built during a forward pass *is* the tape: every produced Tensor
remembers its parents and a closure that pushes adjoints to them.
``backward`` walks that record once, in reverse topological order.

Gradient policy: repeated ``backward`` calls accumulate into ``grad``
(callers reset with ``zero_grads`` between steps).

Broadcasting is limited to leading-axis expansion: two operands are
compatible when their shapes are equal or one shape is a suffix of the
other (a scalar broadcasts against anything).
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError, DimensionError, DomainError


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _result(data, parents, backward_fn):
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _broadcast_shape(sa, sb):
    if sa == sb:
        return sa
    if len(sa) >= len(sb) and sa[len(sa) - len(sb):] == sb:
        return sa
    if len(sb) > len(sa) and sb[len(sb) - len(sa):] == sa:
        return sb
    raise DimensionError(f"shapes {sa} and {sb} do not broadcast along leading axes")


def _unbroadcast(g, shape):
    # sum the adjoint over the expanded leading axes
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    return g


# ---------------------------------------------------------------------------
# elementwise suite


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape)

    def backward(out):
        g = out.grad
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _result(a.data + b.data, (a, b), backward)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape)

    def backward(out):
        g = out.grad
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    return _result(a.data - b.data, (a, b), backward)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape)

    def backward(out):
        g = out.grad
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _result(a.data * b.data, (a, b), backward)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape)

    def backward(out):
        g = out.grad
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _result(a.data / b.data, (a, b), backward)


def scale(a, c):
    a = as_tensor(a)
    c = float(c)

    def backward(out):
        if a.requires_grad:
            a._accumulate(out.grad * c)

    return _result(a.data * c, (a,), backward)


def exp(a):
    a = as_tensor(a)
    y = np.exp(a.data)

    def backward(out):
        if a.requires_grad:
            a._accumulate(out.grad * y)

    return _result(y, (a,), backward)


def log(a):
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise DomainError("log requires strictly positive input")
    y = np.log(a.data)

    def backward(out):
        if a.requires_grad:
            a._accumulate(out.grad / a.data)

    return _result(y, (a,), backward)


def sigmoid(a):
    a = as_tensor(a)
    y = 1.0 / (1.0 + np.exp(-a.data))

    def backward(out):
        if a.requires_grad:
            a._accumulate(out.grad * y * (1.0 - y))

    return _result(y, (a,), backward)


def relu(a):
    a = as_tensor(a)
    keep = a.data > 0

    def backward(out):
        if a.requires_grad:
            a._accumulate(out.grad * keep)

    return _result(np.where(keep, a.data, 0.0), (a,), backward)


def abs_val(a):
    a = as_tensor(a)
    s = np.sign(a.data)

    def backward(out):
        if a.requires_grad:
            a._accumulate(out.grad * s)

    return _result(np.abs(a.data), (a,), backward)


def clip_min(a, floor):
    """max(a, floor) elementwise; gradient passes only where a > floor."""
    a = as_tensor(a)
    floor = float(floor)
    keep = a.data > floor

    def backward(out):
        if a.requires_grad:
            a._accumulate(out.grad * keep)

    return _result(np.where(keep, a.data, floor), (a,), backward)


# ---------------------------------------------------------------------------
# linear algebra and shaping


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shapes incompatible: {a.shape} x {b.shape}")

    def backward(out):
        g = out.grad
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    return _result(a.data @ b.data, (a, b), backward)


def transpose(a, axes=None):
    a = as_tensor(a)
    axes_t = tuple(axes) if axes is not None else tuple(reversed(range(a.data.ndim)))
    inv = np.argsort(axes_t)

    def backward(out):
        if a.requires_grad:
            a._accumulate(out.grad.transpose(inv))

    return _result(a.data.transpose(axes_t), (a,), backward)


def reshape(a, shape):
    a = as_tensor(a)
    old = a.shape

    def backward(out):
        if a.requires_grad:
            a._accumulate(out.grad.reshape(old))

    return _result(a.data.reshape(shape), (a,), backward)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise DimensionError("concat of empty tensor list")
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(out):
        pieces = np.split(out.grad, splits, axis=axis)
        for t, g in zip(tensors, pieces):
            if t.requires_grad:
                t._accumulate(g)

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def slice_axis(a, axis, start, stop):
    a = as_tensor(a)
    if not (0 <= start <= stop <= a.shape[axis]):
        raise IndexError(f"slice [{start}:{stop}] out of range for axis {axis} of {a.shape}")
    sl = [slice(None)] * a.data.ndim
    sl[axis] = slice(start, stop)
    sl = tuple(sl)

    def backward(out):
        if a.requires_grad:
            if a.grad is None:
                a.grad = np.zeros_like(a.data)
            a.grad[sl] += out.grad

    return _result(a.data[sl], (a,), backward)


def reduce_sum(a, axis=None):
    a = as_tensor(a)

    def backward(out):
        if a.requires_grad:
            g = out.grad
            if axis is not None:
                g = np.expand_dims(g, axis)
            a._accumulate(np.broadcast_to(g, a.shape).copy())

    return _result(a.data.sum(axis=axis), (a,), backward)


def reduce_mean(a, axis=None):
    a = as_tensor(a)
    n = a.data.size if axis is None else a.shape[axis]

    def backward(out):
        if a.requires_grad:
            g = out.grad / n
            if axis is not None:
                g = np.expand_dims(g, axis)
            a._accumulate(np.broadcast_to(g, a.shape).copy())

    return _result(a.data.mean(axis=axis), (a,), backward)


def softmax_last_axis(a):
    a = as_tensor(a)
    if a.data.size == 0 or a.shape[-1] < 1:
        raise DimensionError("softmax over an empty last axis")
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(out):
        if a.requires_grad:
            g = out.grad
            a._accumulate(y * (g - (y * g).sum(axis=-1, keepdims=True)))

    return _result(y, (a,), backward)


def linear(x, w, b=None):
    """x @ w (+ b). Accepts a 1-D or 2-D x; w is (in, out)."""
    x = as_tensor(x)
    if x.data.ndim == 1:
        y = reshape(matmul(reshape(x, (1, -1)), w), (w.shape[1],))
    else:
        y = matmul(x, w)
    return add(y, b) if b is not None else y


def embedding_lookup(table, index):
    table = as_tensor(table)
    index = int(index)
    if not 0 <= index < table.shape[0]:
        raise IndexError(f"embedding index {index} out of range for table {table.shape}")

    def backward(out):
        if table.requires_grad:
            if table.grad is None:
                table.grad = np.zeros_like(table.data)
            table.grad[index] += out.grad

    return _result(table.data[index], (table,), backward)


def embedding_rows(table, indices):
    """Gather table rows by an integer index array; grads scatter-add back."""
    table = as_tensor(table)
    indices = np.asarray(indices, dtype=np.int64)
    if indices.size and not (0 <= indices.min() and indices.max() < table.shape[0]):
        raise IndexError(f"embedding indices outside table of {table.shape[0]} rows")

    def backward(out):
        if table.requires_grad:
            if table.grad is None:
                table.grad = np.zeros_like(table.data)
            np.add.at(table.grad, indices, out.grad)

    return _result(table.data[indices], (table,), backward)


# ---------------------------------------------------------------------------
# backward pass


def backward(loss):
    """Populate ``grad`` on every requires_grad tensor reachable from loss."""
    if loss.data.size != 1:
        raise ContractError(f"backward requires a scalar loss, got shape {loss.shape}")
    topo = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            stack.append((p, False))

    loss._accumulate(np.ones_like(loss.data))
    for node in reversed(topo):
        if node._backward is not None:
            node._backward(node)


def zero_grads(tensors):
    for t in tensors:
        t.grad = None
