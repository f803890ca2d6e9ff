"""Minimal reverse-mode differentiation over numpy arrays.

Only what the field model needs: elementwise arithmetic with broadcasting,
2-D matmul, reductions, a few unary functions, gather, concat and reshapes.
Nodes that do not depend on a ``requires_grad`` leaf are plain constants,
so graph-building overhead stays proportional to the differentiable part.
"""

from __future__ import annotations

import numpy as np


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_prev", "_back")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, _prev: tuple = (), _back=None):
        self.data = data if isinstance(data, np.ndarray) and data.dtype == np.float64 \
            else np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self._prev = _prev
        self._back = _back

    # -- basics ---------------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __len__(self) -> int:
        return len(self.data)

    def __float__(self) -> float:
        return float(self.data)

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(node) into ``.grad`` of every upstream node."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.data)
        order, seen, stack = [], set(), [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            stack.extend((p, False) for p in node._prev)
        grads = {id(self): np.broadcast_to(np.asarray(grad, dtype=np.float64), self.shape)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            node.grad = g if node.grad is None else node.grad + g
            if node._back is None:
                continue
            for parent, pg in zip(node._prev, node._back(g)):
                if pg is None or not parent.requires_grad:
                    continue
                k = id(parent)
                grads[k] = pg if k not in grads else grads[k] + pg

    # -- operators ------------------------------------------------------

    def __add__(self, o):
        return add(self, o)

    __radd__ = __add__

    def __sub__(self, o):
        return add(self, neg(_t(o)))

    def __rsub__(self, o):
        return add(_t(o), neg(self))

    def __mul__(self, o):
        return mul(self, o)

    __rmul__ = __mul__

    def __truediv__(self, o):
        if isinstance(o, Tensor):
            return mul(self, reciprocal(o))
        return mul(self, 1.0 / np.asarray(o, dtype=np.float64))

    def __rtruediv__(self, o):
        return mul(_t(o), reciprocal(self))

    def __neg__(self):
        return neg(self)

    def __pow__(self, k: float):
        return power(self, k)

    def __matmul__(self, o):
        return matmul(self, o)

    def __getitem__(self, key):
        return getitem(self, key)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else self.data.shape[axis]
        return tsum(self, axis, keepdims) * (1.0 / n)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents: tuple, back) -> Tensor:
    if any(p.requires_grad for p in parents):
        return Tensor(data, True, parents, back)
    return Tensor(data)


def add(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    sa, sb = a.shape, b.shape
    return _node(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def neg(a: Tensor) -> Tensor:
    return _node(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    sa, sb = a.shape, b.shape
    return _node(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, sa) if a.requires_grad else None,
                            _unbroadcast(g * a.data, sb) if b.requires_grad else None))


def reciprocal(a: Tensor) -> Tensor:
    y = 1.0 / a.data
    return _node(y, (a,), lambda g: (-g * y * y,))


def power(a: Tensor, k: float) -> Tensor:
    return _node(a.data ** k, (a,), lambda g: (g * k * a.data ** (k - 1),))


def matmul(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    return _node(a.data @ b.data, (a, b),
                 lambda g: (g @ b.data.T if a.requires_grad else None,
                            a.data.T @ g if b.requires_grad else None))


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    shape = a.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _node(a.data.sum(axis=axis, keepdims=keepdims), (a,), back)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor) -> Tensor:
    return _node(a.data.T, (a,), lambda g: (g.T,))


def getitem(a: Tensor, key) -> Tensor:
    shape = a.shape
    keys = key if isinstance(key, tuple) else (key,)
    basic = all(isinstance(k, (int, slice, type(None), type(Ellipsis))) for k in keys)

    def back(g):
        out = np.zeros(shape)
        if basic:
            out[key] += g
        else:
            np.add.at(out, key, g)
        return (out,)

    return _node(a.data[key], (a,), back)


def take_rows(a: Tensor, index: np.ndarray) -> Tensor:
    """``a.data[index]`` for an integer index array of any shape."""
    shape = a.shape

    def back(g):
        out = np.zeros(shape)
        np.add.at(out, index.reshape(-1), g.reshape((-1,) + shape[1:]))
        return (out,)

    return _node(a.data[index], (a,), back)


def concat(items, axis: int = 0) -> Tensor:
    items = [_t(x) for x in items]
    sizes = np.cumsum([x.shape[axis] for x in items])[:-1]

    def back(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _node(np.concatenate([x.data for x in items], axis=axis), tuple(items), back)


def absolute(a: Tensor) -> Tensor:
    return _node(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _node(a.data * mask, (a,), lambda g: (g * mask,))


def tanh(a) -> Tensor:
    a = _t(a)
    y = np.tanh(a.data)
    return _node(y, (a,), lambda g: (g * (1.0 - y * y),))


def sin(a: Tensor) -> Tensor:
    return _node(np.sin(a.data), (a,), lambda g: (g * np.cos(a.data),))


def cos(a: Tensor) -> Tensor:
    return _node(np.cos(a.data), (a,), lambda g: (-g * np.sin(a.data),))


def sqrt(a: Tensor) -> Tensor:
    y = np.sqrt(a.data)
    return _node(y, (a,), lambda g: (g * 0.5 / y,))


def norm(a: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    """Euclidean norm along ``axis``; the subgradient at 0 is taken as 0."""
    n = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=True))
    safe = np.where(n > 0, n, 1.0)

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * np.where(n > 0, a.data / safe, 0.0),)

    return _node(n if keepdims else np.squeeze(n, axis=axis), (a,), back)
