"""Tape-style reverse-mode differentiation over a closed set of array ops.

Every op here accepts ``Var`` or plain arrays. When no input is a ``Var`` the
op returns a plain ``ndarray`` and records nothing, so composite functions
written against this module run unchanged in pure inference. When any input
is a ``Var`` the result is a ``Var`` node remembering its op name, parents and
whatever forward values its backward rule needs.

Backward rules live in a registry keyed by op name; ``backward`` refuses to
traverse a node whose op has no registered rule.

Conventions: ReLU has derivative 0 at exactly 0; ``clamp_min`` passes the
gradient only where the input is strictly above the bound.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import tensor as T
from . import wavelet as W


class UnsupportedOpError(RuntimeError):
    pass


class Var:
    __slots__ = ("value", "op", "parents", "ctx", "grad", "name", "__weakref__")
    __array_priority__ = 100.0

    def __init__(self, value, op: str = "leaf", parents=(), ctx=None, name: str | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.op = op
        self.parents = tuple(parents)
        self.ctx = ctx
        self.grad = None
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Var{label}(op={self.op}, shape={self.shape})"

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

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)


def value_of(x):
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=np.float64)


def _node(op: str, value, inputs, ctx=None):
    if any(isinstance(i, Var) for i in inputs):
        return Var(value, op, inputs, ctx)
    return value


_VJP: dict[str, Callable] = {}


def _rule(name: str):
    def register(fn):
        _VJP[name] = fn
        return fn

    return register


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# -- elementwise ---------------------------------------------------------------------


def add(a, b):
    return _node("add", value_of(a) + value_of(b), (a, b))


@_rule("add")
def _(node, g):
    a, b = node.parents
    return _unbroadcast(g, np.shape(value_of(a))), _unbroadcast(g, np.shape(value_of(b)))


def sub(a, b):
    return _node("sub", value_of(a) - value_of(b), (a, b))


@_rule("sub")
def _(node, g):
    a, b = node.parents
    return _unbroadcast(g, np.shape(value_of(a))), _unbroadcast(-g, np.shape(value_of(b)))


def mul(a, b):
    return _node("mul", value_of(a) * value_of(b), (a, b))


@_rule("mul")
def _(node, g):
    a, b = node.parents
    va, vb = value_of(a), value_of(b)
    ga = _unbroadcast(g * vb, va.shape) if isinstance(a, Var) else None
    gb = _unbroadcast(g * va, vb.shape) if isinstance(b, Var) else None
    return ga, gb


def div(a, b):
    return _node("div", value_of(a) / value_of(b), (a, b))


@_rule("div")
def _(node, g):
    a, b = node.parents
    va, vb = value_of(a), value_of(b)
    ga = g / vb
    gb = _unbroadcast(-ga * va / vb, vb.shape) if isinstance(b, Var) else None
    return _unbroadcast(ga, va.shape), gb


def relu(x):
    return _node("relu", T.relu(value_of(x)), (x,))


@_rule("relu")
def _(node, g):
    return (g * (value_of(node.parents[0]) > 0),)


def sigmoid(x):
    return _node("sigmoid", T.sigmoid(value_of(x)), (x,))


@_rule("sigmoid")
def _(node, g):
    s = node.value
    return (g * s * (1.0 - s),)


def clamp_min(x, lo: float):
    return _node("clamp_min", np.maximum(value_of(x), lo), (x,), lo)


@_rule("clamp_min")
def _(node, g):
    return (g * (value_of(node.parents[0]) > node.ctx),)


# -- shape and reductions ------------------------------------------------------------


def matmul(a, b):
    return _node("matmul", T.matmul_batched(value_of(a), value_of(b)), (a, b))


@_rule("matmul")
def _(node, g):
    a, b = node.parents
    va, vb = value_of(a), value_of(b)
    ga = _unbroadcast(np.matmul(g, np.swapaxes(vb, -1, -2)), va.shape) if isinstance(a, Var) else None
    gb = _unbroadcast(np.matmul(np.swapaxes(va, -1, -2), g), vb.shape) if isinstance(b, Var) else None
    return ga, gb


def sum(x, axis=None, keepdims: bool = False):  # noqa: A001
    return _node("sum", np.sum(value_of(x), axis=axis, keepdims=keepdims), (x,), (axis, keepdims))


@_rule("sum")
def _(node, g):
    shape = value_of(node.parents[0]).shape
    axis, keepdims = node.ctx
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, shape),)


def mean(x, axis=None, keepdims: bool = False):
    return _node("mean", np.mean(value_of(x), axis=axis, keepdims=keepdims), (x,), (axis, keepdims))


@_rule("mean")
def _(node, g):
    shape = value_of(node.parents[0]).shape
    axis, keepdims = node.ctx
    if axis is None:
        count = int(np.prod(shape))
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([shape[a] for a in axes]))
        if not keepdims:
            g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, shape) / count,)


def reshape(x, shape):
    return _node("reshape", T.reshape(value_of(x), shape), (x,))


@_rule("reshape")
def _(node, g):
    return (g.reshape(value_of(node.parents[0]).shape),)


def transpose(x, axes):
    return _node("transpose", np.transpose(value_of(x), axes), (x,), tuple(axes))


@_rule("transpose")
def _(node, g):
    return (np.transpose(g, np.argsort(node.ctx)),)


def swap_last_two(x):
    nd = value_of(x).ndim
    axes = list(range(nd))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, axes)


def getitem(x, index):
    return _node("getitem", value_of(x)[index], (x,), index)


@_rule("getitem")
def _(node, g):
    out = np.zeros_like(value_of(node.parents[0]))
    np.add.at(out, node.ctx, g)
    return (out,)


def embedding(table, ids):
    """Rows of ``table`` selected by integer ``ids`` (ids are never differentiated)."""
    ids = np.asarray(ids)
    return _node("embedding", value_of(table)[ids], (table,), ids)


@_rule("embedding")
def _(node, g):
    out = np.zeros_like(value_of(node.parents[0]))
    np.add.at(out, node.ctx, g)
    return (out,)


# -- normalisation -------------------------------------------------------------------


def softmax(x):
    return _node("softmax", T.softmax_lastdim(value_of(x)), (x,))


@_rule("softmax")
def _(node, g):
    s = node.value
    return (s * (g - np.sum(g * s, axis=-1, keepdims=True)),)


def layer_norm(x, gamma, beta, eps: float = 1e-5):
    vx = value_of(x)
    mu = vx.mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(vx.var(axis=-1, keepdims=True) + eps)
    xhat = (vx - mu) * inv
    out = xhat * value_of(gamma) + value_of(beta)
    return _node("layer_norm", out, (x, gamma, beta), (xhat, inv))


@_rule("layer_norm")
def _(node, g):
    x, gamma, beta = node.parents
    xhat, inv = node.ctx
    vg = value_of(gamma)
    gxhat = g * vg
    d = xhat.shape[-1]
    gx = inv / d * (d * gxhat - gxhat.sum(-1, keepdims=True) - xhat * np.sum(gxhat * xhat, -1, keepdims=True))
    ggamma = _unbroadcast(g * xhat, vg.shape) if isinstance(gamma, Var) else None
    gbeta = _unbroadcast(g, np.shape(value_of(beta))) if isinstance(beta, Var) else None
    return gx, ggamma, gbeta


def cross_entropy(logits, labels):
    """Mean negative log-likelihood of integer ``labels`` under ``softmax(logits)``."""
    labels = np.asarray(labels)
    z = value_of(logits)
    z = z - z.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    loss = -logp[np.arange(len(labels)), labels].mean()
    return _node("cross_entropy", np.asarray(loss), (logits,), (np.exp(logp), labels))


@_rule("cross_entropy")
def _(node, g):
    probs, labels = node.ctx
    grad = probs.copy()
    grad[np.arange(len(labels)), labels] -= 1.0
    return (g * grad / len(labels),)


# -- Haar transform ------------------------------------------------------------------


def dwt(x, levels: int, pad_to_levels: bool = False):
    """Packed Haar decomposition (see :func:`wersa.wavelet.dwt_packed`)."""
    packed, n = W.dwt_packed(value_of(x), levels, pad_to_levels)
    return _node("dwt", packed, (x,), (levels, n))


@_rule("dwt")
def _(node, g):
    # orthonormal transform of the zero-padded input: adjoint is the trimmed inverse
    levels, n = node.ctx
    return (W.idwt_packed(g, levels, n),)


def idwt(packed, levels: int, orig_len: int):
    return _node("idwt", W.idwt_packed(value_of(packed), levels, orig_len), (packed,), (levels, value_of(packed).shape[-2]))


@_rule("idwt")
def _(node, g):
    levels, padded = node.ctx
    pad = np.zeros(g.shape[:-2] + (padded,) + g.shape[-1:])
    pad[..., : g.shape[-2], :] = g
    packed, _ = W.dwt_packed(pad, levels)
    return (packed,)


# -- reverse sweep -------------------------------------------------------------------


def _topological(root: Var) -> list[Var]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if isinstance(p, Var) and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Var, params: dict[str, Var] | None = None) -> dict[str, np.ndarray]:
    """Accumulate ``d loss / d node`` into ``.grad`` of every node reachable from ``loss``.

    Returns gradients of the named leaves in ``params`` (zeros for leaves the
    loss does not depend on).
    """
    if not isinstance(loss, Var):
        raise TypeError("loss does not depend on any Var")
    if loss.value.size != 1:
        raise ValueError(f"loss must be scalar, got shape {loss.shape}")
    order = _topological(loss)
    for node in order:
        node.grad = None
    loss.grad = np.ones_like(loss.value)
    for node in reversed(order):
        if node.op == "leaf" or node.grad is None:
            continue
        rule = _VJP.get(node.op)
        if rule is None:
            raise UnsupportedOpError(f"no backward rule for op {node.op!r}")
        grads = rule(node, node.grad)
        for parent, pg in zip(node.parents, grads):
            if not isinstance(parent, Var) or pg is None:
                continue
            # never mutated in place, so read-only broadcast views are safe to keep
            parent.grad = pg if parent.grad is None else parent.grad + pg
    if params is None:
        return {}
    return {
        name: (v.grad if v.grad is not None else np.zeros_like(v.value))
        for name, v in params.items()
    }


def supported_ops() -> list[str]:
    return sorted(_VJP)
