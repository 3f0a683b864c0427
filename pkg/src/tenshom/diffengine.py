"""Reverse-mode tape over float64 numpy arrays.

The primitive set is exactly what the separable pipeline needs: affine maps,
sine/cosine, elementwise arithmetic with broadcasting, square root, sums,
reshapes/transposes/concatenation, and 2D matmul (the weighted contraction).
Leaves are the trainable parameter arrays; one reverse sweep per loss.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

from .errors import TrainingError

_GRAD_ENABLED = [True]


@contextmanager
def no_grad():
    """Disable taping inside the block; every op returns a constant node."""
    _GRAD_ENABLED.append(False)
    try:
        yield
    finally:
        _GRAD_ENABLED.pop()


class Tensor:
    """A tape node: float64 ndarray value plus the recorded backward rule."""

    __array_ufunc__ = None  # keep numpy from elementwise-hijacking mixed ops
    __slots__ = ("value", "parents", "bwd", "requires")

    def __init__(self, value, parents=(), bwd=None, requires=False):
        if isinstance(value, np.ndarray) and value.dtype == np.float64:
            self.value = value
        else:
            self.value = np.asarray(value, dtype=np.float64)
        self.parents = parents
        self.bwd = bwd
        self.requires = requires

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    # -- operator sugar ----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __pow__(self, k):
        return power(self, k)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)

    def item(self) -> float:
        return float(self.value)


def leaf(value) -> Tensor:
    """A trainable leaf; gradients accumulate here."""
    return Tensor(np.array(value, dtype=np.float64), requires=True)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def val(x) -> np.ndarray:
    """Detach: the plain ndarray behind either an ndarray or a Tensor."""
    return x.value if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _node(value, pairs):
    """Build a node from (parent, grad_fn) pairs, pruning constant branches."""
    live = [(p, fn) for p, fn in pairs if p.requires]
    if not (live and _GRAD_ENABLED[-1]):
        return Tensor(value)

    def bwd(g, acc):
        for p, fn in live:
            gp = fn(g)
            key = id(p)
            if key in acc:
                acc[key] = acc[key] + gp
            else:
                acc[key] = gp

    return Tensor(value, tuple(p for p, _ in live), bwd, True)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- primitives -------------------------------------------------------------

def add(a, b):
    a, b = _lift(a), _lift(b)
    av, bv = a.value, b.value
    return _node(av + bv, [(a, lambda g: _unbroadcast(g, av.shape)),
                           (b, lambda g: _unbroadcast(g, bv.shape))])


def sub(a, b):
    a, b = _lift(a), _lift(b)
    av, bv = a.value, b.value
    return _node(av - bv, [(a, lambda g: _unbroadcast(g, av.shape)),
                           (b, lambda g: _unbroadcast(-g, bv.shape))])


def neg(a):
    a = _lift(a)
    return _node(-a.value, [(a, lambda g: -g)])


def mul(a, b):
    a, b = _lift(a), _lift(b)
    av, bv = a.value, b.value
    return _node(av * bv, [(a, lambda g: _unbroadcast(g * bv, av.shape)),
                           (b, lambda g: _unbroadcast(g * av, bv.shape))])


def div(a, b):
    a, b = _lift(a), _lift(b)
    av, bv = a.value, b.value
    out = av / bv
    return _node(out, [(a, lambda g: _unbroadcast(g / bv, av.shape)),
                       (b, lambda g: _unbroadcast(-g * out / bv, bv.shape))])


def power(a, k):
    a = _lift(a)
    k = float(k)
    av = a.value
    return _node(av ** k, [(a, lambda g: g * k * av ** (k - 1.0))])


def matmul(a, b):
    a, b = _lift(a), _lift(b)
    av, bv = a.value, b.value
    if av.ndim != 2 or bv.ndim != 2:
        raise ValueError("matmul primitive is 2D-only")
    return _node(av @ bv, [(a, lambda g: g @ bv.T), (b, lambda g: av.T @ g)])


def sin(a):
    a = _lift(a)
    av = a.value
    return _node(np.sin(av), [(a, lambda g: g * np.cos(av))])


def cos(a):
    a = _lift(a)
    av = a.value
    return _node(np.cos(av), [(a, lambda g: -g * np.sin(av))])


def sqrt(a):
    a = _lift(a)
    out = np.sqrt(a.value)
    return _node(out, [(a, lambda g: g * (0.5 / out))])


def tsum(a, axis=None, keepdims=False):
    a = _lift(a)
    av = a.value
    out = av.sum(axis=axis, keepdims=keepdims)

    def back(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, av.shape)

    return _node(np.asarray(out), [(a, back)])


def reshape(a, shape):
    a = _lift(a)
    old = a.value.shape
    return _node(a.value.reshape(shape), [(a, lambda g: g.reshape(old))])


def transpose(a, axes=None):
    a = _lift(a)
    out = a.value.transpose(axes)
    if axes is None:
        inv = None
    else:
        inv = tuple(np.argsort(axes))
    return _node(out, [(a, lambda g: g.transpose(inv))])


def concat(parts, axis=0):
    parts = [_lift(p) for p in parts]
    values = [p.value for p in parts]
    sizes = [v.shape[axis] for v in values]
    offsets = np.cumsum([0] + sizes)

    pairs = []
    for i, p in enumerate(parts):
        lo, hi = offsets[i], offsets[i + 1]

        def cut(g, lo=lo, hi=hi):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            return g[tuple(sl)]

        pairs.append((p, cut))
    return _node(np.concatenate(values, axis=axis), pairs)


# -- reverse pass and parameter plumbing -------------------------------------

def backward(root: Tensor) -> dict:
    """Gradients of `root` (summed to a scalar seed) for every live node.

    Returns a dict id(node) -> ndarray. Each recorded node is visited once.
    """
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen or not node.requires:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires and id(p) not in seen:
                stack.append((p, False))

    grads = {id(root): np.ones_like(root.value)}
    for node in reversed(order):
        g = grads.get(id(node))
        if g is None or node.bwd is None:
            continue
        node.bwd(g, grads)
        del grads[id(node)]  # free intermediates; leaf grads stay
    return grads


class ParamVector:
    """Ordered trainable leaves with a flat-vector layout map.

    Frozen arrays (e.g. periodic first-layer weights) are simply not listed.
    """

    def __init__(self, entries):
        self.entries = list(entries)  # (name, Tensor)
        self._shapes = [t.value.shape for _, t in self.entries]
        sizes = [int(np.prod(s)) if s else 1 for s in self._shapes]
        self._offsets = np.cumsum([0] + sizes)

    @property
    def size(self) -> int:
        return int(self._offsets[-1])

    def layout(self):
        return [(name, shape, int(off))
                for (name, _), shape, off in zip(self.entries, self._shapes, self._offsets)]

    def flatten(self) -> np.ndarray:
        if not self.entries:
            return np.zeros(0)
        return np.concatenate([t.value.ravel() for _, t in self.entries])

    def assign(self, flat: np.ndarray):
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != self.size:
            raise ValueError(f"flat vector size {flat.size} != parameter count {self.size}")
        for (name, t), shape, off in zip(self.entries, self._shapes, self._offsets):
            n = int(np.prod(shape)) if shape else 1
            np.copyto(t.value, flat[off:off + n].reshape(shape))


def gradient(loss: Tensor, params: ParamVector) -> np.ndarray:
    """Full reverse pass; returns d(loss)/d(theta) in the ParamVector layout."""
    if not np.isfinite(loss.value).all():
        raise TrainingError(f"loss is non-finite: {loss.value}")
    grads = backward(loss)
    parts = []
    for _, t in params.entries:
        g = grads.get(id(t))
        parts.append(np.zeros(t.value.size) if g is None else np.asarray(g).ravel())
    flat = np.concatenate(parts) if parts else np.zeros(0)
    if not np.isfinite(flat).all():
        raise TrainingError("gradient contains non-finite entries")
    return flat


def forward_channels(layers, nodes: np.ndarray, order: int = 2):
    """Propagate (u, u', u'') through affine layers with sine activations.

    layers: sequence of (W, b, activate) with W shaped (out, in); the chain
    rules for the input-derivative channels are explicit:
        z = a W^T + b,  z' = a' W^T,  z'' = a'' W^T
        s = sin(z), s' = cos(z) z', s'' = -sin(z) (z')^2 + cos(z) z''
    Returns (p, N) tensors (u, du, d2u); du/d2u are None above `order`.
    """
    n = nodes.size
    a = Tensor(nodes.reshape(n, 1).astype(np.float64))
    da = Tensor(np.ones((n, 1))) if order >= 1 else None
    d2a = Tensor(np.zeros((n, 1))) if order >= 2 else None
    for W, b, activate in layers:
        Wt = transpose(W)
        z = add(matmul(a, Wt), b)
        dz = matmul(da, Wt) if order >= 1 else None
        d2z = matmul(d2a, Wt) if order >= 2 else None
        if activate:
            s, c = sin(z), cos(z)
            a = s
            if order >= 1:
                da = mul(c, dz)
            if order >= 2:
                d2a = sub(mul(c, d2z), mul(s, mul(dz, dz)))
        else:
            a, da, d2a = z, dz, d2z
        if not np.isfinite(a.value).all():
            raise TrainingError("non-finite activation in forward channel pass")
    u = transpose(a)
    du = transpose(da) if order >= 1 else None
    d2u = transpose(d2a) if order >= 2 else None
    return u, du, d2u
