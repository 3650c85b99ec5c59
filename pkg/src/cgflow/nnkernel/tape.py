"""A small reverse-mode autodiff tape over numpy arrays.

Only the handful of elementwise and indexing operations needed by the flow
transforms are provided. Every ``Var`` records its parents and a vector-Jacobian
product; ``backward`` walks the graph in reverse topological order.
"""

from __future__ import annotations

import numpy as np

from .mlp import MlpParams, mlp_backward, mlp_forward_cache


class Var:
    __slots__ = ("value", "grad", "parents", "vjp")

    def __init__(self, value, parents=(), vjp=None):
        self.value = np.asarray(value, dtype=float)
        self.grad = None
        self.parents = parents
        self.vjp = vjp

    @property
    def shape(self):
        return self.value.shape

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
        return Var(-self.value, (self,), lambda g: (-g,))

    def __getitem__(self, idx):
        return getitem(self, idx)

    def __repr__(self):
        return f"Var(shape={self.value.shape})"


def const(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def add(a, b):
    a, b = const(a), const(b)
    sa, sb = a.shape, b.shape
    return Var(a.value + b.value, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    a, b = const(a), const(b)
    sa, sb = a.shape, b.shape
    return Var(a.value - b.value, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b):
    a, b = const(a), const(b)
    av, bv = a.value, b.value
    return Var(av * bv, (a, b), lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def div(a, b):
    a, b = const(a), const(b)
    av, bv = a.value, b.value
    out = av / bv
    return Var(out, (a, b), lambda g: (_unbroadcast(g / bv, av.shape), _unbroadcast(-g * out / bv, bv.shape)))


def square(a):
    av = a.value
    return Var(av * av, (a,), lambda g: (2.0 * g * av,))


def exp(a):
    out = np.exp(a.value)
    return Var(out, (a,), lambda g: (g * out,))


def log(a):
    av = a.value
    return Var(np.log(av), (a,), lambda g: (g / av,))


def sqrt(a):
    out = np.sqrt(a.value)
    return Var(out, (a,), lambda g: (0.5 * g / out,))


def softplus(a):
    av = a.value
    out = np.logaddexp(0.0, av)
    sig = np.exp(av - out)
    return Var(out, (a,), lambda g: (g * sig,))


def softmax(a):
    av = a.value
    e = np.exp(av - av.max(axis=-1, keepdims=True))
    out = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return Var(out, (a,), vjp)


def cumsum(a):
    def vjp(g):
        return (np.flip(np.cumsum(np.flip(g, -1), axis=-1), -1),)

    return Var(np.cumsum(a.value, axis=-1), (a,), vjp)


def pad_last(a, left: float, right: float):
    """Prepend ``left`` and append ``right`` along the last axis."""
    av = a.value
    lead = av.shape[:-1] + (1,)
    out = np.concatenate([np.full(lead, left), av, np.full(lead, right)], axis=-1)
    return Var(out, (a,), lambda g: (g[..., 1:-1],))


def gather(a, idx):
    """``take_along_axis(a, idx[..., None], -1)[..., 0]`` with gradient scatter."""
    av = a.value
    idx = np.asarray(idx)
    out = np.take_along_axis(av, idx[..., None], axis=-1)[..., 0]

    def vjp(g):
        ga = np.zeros_like(av)
        np.put_along_axis(ga, idx[..., None], g[..., None], axis=-1)
        return (ga,)

    return Var(out, (a,), vjp)


def getitem(a, idx):
    av = a.value

    def vjp(g):
        ga = np.zeros_like(av)
        np.add.at(ga, idx, g)
        return (ga,)

    return Var(av[idx], (a,), vjp)


def concat(vars_, axis=-1):
    vars_ = [const(v) for v in vars_]
    sizes = [v.shape[axis] for v in vars_]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return Var(np.concatenate([v.value for v in vars_], axis=axis), tuple(vars_), vjp)


def reshape(a, shape):
    old = a.shape
    return Var(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))


def sum_(a, axis=None):
    av = a.value
    if axis is None:
        return Var(av.sum(), (a,), lambda g: (np.broadcast_to(g, av.shape).copy(),))
    return Var(av.sum(axis=axis), (a,), lambda g: (np.broadcast_to(np.expand_dims(g, axis), av.shape).copy(),))


def where(mask, a, b):
    a, b = const(a), const(b)
    mask = np.asarray(mask, dtype=bool)
    sa, sb = a.shape, b.shape
    return Var(
        np.where(mask, a.value, b.value),
        (a, b),
        lambda g: (_unbroadcast(np.where(mask, g, 0.0), sa), _unbroadcast(np.where(mask, 0.0, g), sb)),
    )


def mlp(params: MlpParams, pvar: Var, x) -> Var:
    """Apply an MLP whose flat parameter buffer is tracked by ``pvar``."""
    x = const(x)
    out, acts = mlp_forward_cache(params, x.value)

    def vjp(g):
        grads, gx = mlp_backward(params, acts, g)
        return grads.flat, gx

    return Var(out, (pvar, x), vjp)


def custom(value, parents, vjp) -> Var:
    """Wrap an externally computed value; ``vjp(g)`` returns one grad per parent."""
    return Var(value, tuple(parents), vjp)


def backward(root: Var, seed=None):
    """Accumulate d(root)/d(leaf) into ``.grad`` of every Var reachable from root."""
    order = []
    seen = set()
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
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    root.grad = np.ones_like(root.value) if seed is None else np.asarray(seed, dtype=float)
    for node in reversed(order):
        if node.vjp is None or node.grad is None:
            continue
        for p, gp in zip(node.parents, node.vjp(node.grad)):
            if gp is None:
                continue
            p.grad = gp if p.grad is None else p.grad + gp
