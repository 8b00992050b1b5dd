"""Reverse-mode differentiation over a dynamically recorded tape.

Every matrix in the package is a plain 2-D ``numpy`` array of ``float32``.
:class:`Tensor` wraps such an array and, while gradient recording is enabled,
remembers the operation that produced it so :func:`backward` can walk the
graph in reverse topological order.

Arithmetic never traps: NaN and Inf flow through every operation the way
IEEE-754 says they should, because corrupted values have to reach the
aggregators untouched.
"""
from __future__ import annotations

import contextlib
import threading

import numpy as np

from .exceptions import ContractError, ShapeError

DTYPE = np.float32

_state = threading.local()


def is_grad_enabled():
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (inference)."""
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class _Quiet(contextlib.ContextDecorator):
    """Silence floating-point warnings; corrupt values are expected to flow."""

    def __init__(self):
        self._local = threading.local()

    def _stack(self):
        if not hasattr(self._local, "stack"):
            self._local.stack = []
        return self._local.stack

    def __enter__(self):
        state = np.errstate(all="ignore")
        state.__enter__()
        self._stack().append(state)
        return self

    def __exit__(self, *exc):
        self._stack().pop().__exit__(*exc)
        return False


_quiet = _Quiet()


class Tensor:
    """A dense array plus the bookkeeping needed for reverse-mode AD."""

    __slots__ = ("value", "grad", "requires_grad", "_parents", "_backward", "op", "name")

    __array_priority__ = 100

    def __init__(self, value, requires_grad=False, dtype=None, name=None):
        if isinstance(value, Tensor):
            value = value.value
        arr = np.asarray(value)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype != np.float64:
            arr = arr.astype(DTYPE, copy=False)
        self.value = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self.op = "leaf"
        self.name = name

    # --- construction helpers -------------------------------------------
    @classmethod
    def _from_op(cls, value, parents, backward, op):
        out = cls(value, dtype=value.dtype)
        tracked = [p for p in parents if isinstance(p, Tensor)]
        if is_grad_enabled() and any(p.requires_grad for p in tracked):
            out.requires_grad = True
            out._parents = tuple(tracked)
            out._backward = backward
            out.op = op
        return out

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    @property
    def ndim(self):
        return self.value.ndim

    def numpy(self):
        return self.value

    def detach(self):
        return Tensor(self.value, dtype=self.value.dtype)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # --- operator sugar ---------------------------------------------------
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

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _val(x):
    return x.value if isinstance(x, Tensor) else np.asarray(x)


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# --- elementwise ------------------------------------------------------------

@_quiet
def add(a, b):
    av, bv = _val(a), _val(b)
    out = np.add(av, bv)

    def backward(g):
        return _unbroadcast(g, av.shape), _unbroadcast(g, bv.shape)

    return Tensor._from_op(out, (a, b), _pair(a, b, backward), "add")


@_quiet
def sub(a, b):
    av, bv = _val(a), _val(b)
    out = np.subtract(av, bv)

    def backward(g):
        return _unbroadcast(g, av.shape), _unbroadcast(-g, bv.shape)

    return Tensor._from_op(out, (a, b), _pair(a, b, backward), "sub")


@_quiet
def mul(a, b):
    av, bv = _val(a), _val(b)
    out = np.multiply(av, bv)

    def backward(g):
        with _quiet:
            return _unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)

    return Tensor._from_op(out, (a, b), _pair(a, b, backward), "mul")


@_quiet
def div(a, b):
    av, bv = _val(a), _val(b)
    out = np.divide(av, bv)

    def backward(g):
        with _quiet:
            ga = g / bv
            return _unbroadcast(ga, av.shape), _unbroadcast(-ga * out, bv.shape)

    return Tensor._from_op(out, (a, b), _pair(a, b, backward), "div")


def _pair(a, b, backward):
    """Adapt a two-operand backward rule to the tensors actually tracked."""
    a_t, b_t = isinstance(a, Tensor), isinstance(b, Tensor)
    if a_t and b_t:
        return backward
    if a_t:
        return lambda g: (backward(g)[0],)
    return lambda g: (backward(g)[1],)


@_quiet
def relu(x):
    xv = _val(x)
    out = np.maximum(xv, 0).astype(xv.dtype, copy=False)

    def backward(g):
        return (g * (xv > 0),)

    return Tensor._from_op(out, (x,), backward, "relu")


@_quiet
def exp(x):
    xv = _val(x)
    out = np.exp(xv)
    return Tensor._from_op(out, (x,), lambda g: (g * out,), "exp")


@_quiet
def log(x):
    xv = _val(x)
    out = np.log(xv)
    return Tensor._from_op(out, (x,), lambda g: (g / xv,), "log")


def square(x):
    return mul(x, x)


@_quiet
def where(mask, x, fill=0.0):
    """Keep ``x`` where ``mask`` is true, ``fill`` elsewhere (constant mask).

    Unlike ``x * mask`` this never produces ``0 * inf = nan``.
    """
    xv = _val(x)
    mask = np.asarray(mask, dtype=bool)
    out = np.where(mask, xv, np.asarray(fill, dtype=xv.dtype))

    def backward(g):
        return (_unbroadcast(np.where(mask, g, 0).astype(g.dtype, copy=False), xv.shape),)

    return Tensor._from_op(out, (x,), backward, "where")


@_quiet
def select(mask, a, b):
    """Elementwise ``a`` where ``mask`` else ``b``; gradient follows the pick."""
    av, bv = _val(a), _val(b)
    mask = np.asarray(mask, dtype=bool)
    out = np.where(mask, av, bv)

    def backward(g):
        zero = np.zeros((), dtype=g.dtype)
        return (_unbroadcast(np.where(mask, g, zero), av.shape),
                _unbroadcast(np.where(mask, zero, g), bv.shape))

    return Tensor._from_op(out, (a, b), _pair(a, b, backward), "select")


def column(x, k):
    """Column ``k`` of a 2-D tensor as an ``(rows, 1)`` tensor."""
    xv = _val(x)

    def backward(g):
        full = np.zeros_like(xv)
        full[:, k:k + 1] = g
        return (full,)

    return Tensor._from_op(xv[:, k:k + 1].copy(), (x,), backward, "column")


@_quiet
def clip(x, lo, hi):
    """Clamp into constant bounds ``[lo, hi]`` (broadcast per column)."""
    xv = _val(x)
    lo = np.asarray(lo, dtype=xv.dtype)
    hi = np.asarray(hi, dtype=xv.dtype)
    out = np.minimum(np.maximum(xv, lo), hi)
    inside = (xv >= lo) & (xv <= hi)

    def backward(g):
        return (g * inside,)

    return Tensor._from_op(out, (x,), backward, "clip")


# --- reductions -------------------------------------------------------------

@_quiet
def sum_(x, axis=None, keepdims=False):
    xv = _val(x)
    out = np.sum(xv, axis=axis, keepdims=keepdims, dtype=np.float64).astype(xv.dtype)

    def backward(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, xv.shape).astype(xv.dtype),)

    return Tensor._from_op(np.asarray(out), (x,), backward, "sum")


def mean(x, axis=None, keepdims=False):
    xv = _val(x)
    count = xv.size if axis is None else xv.shape[axis]
    return mul(sum_(x, axis=axis, keepdims=keepdims), 1.0 / count)


# --- linear algebra ---------------------------------------------------------

@_quiet
def matmul(a, b):
    av, bv = _val(a), _val(b)
    if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {av.shape} by {bv.shape}")
    out = av @ bv

    def backward(g):
        with _quiet:
            return g @ bv.T, av.T @ g

    return Tensor._from_op(out, (a, b), _pair(a, b, backward), "matmul")


@_quiet
def spmm(P, x):
    """Product of a constant sparse matrix with a dense tensor."""
    xv = _val(x)
    if P.shape[1] != xv.shape[0]:
        raise ShapeError(f"spmm: cannot multiply {P.shape} by {xv.shape}")
    out = np.asarray(P @ xv).astype(xv.dtype, copy=False)

    def backward(g):
        with _quiet:
            return (np.asarray(P.T @ g).astype(g.dtype, copy=False),)

    return Tensor._from_op(out, (x,), backward, "spmm")


def gather_rows(x, index):
    xv = _val(x)
    index = np.asarray(index, dtype=np.int64)
    out = xv[index]

    def backward(g):
        acc = np.zeros_like(xv)
        with _quiet:
            np.add.at(acc, index, g)
        return (acc,)

    return Tensor._from_op(out, (x,), backward, "gather_rows")


def reshape(x, shape):
    xv = _val(x)
    return Tensor._from_op(xv.reshape(shape), (x,), lambda g: (g.reshape(xv.shape),), "reshape")


def concat_rows(parts):
    """Stack tensors vertically."""
    vals = [_val(p) for p in parts]
    out = np.concatenate(vals, axis=0)
    bounds = np.cumsum([0] + [v.shape[0] for v in vals])

    def backward(g):
        return tuple(g[bounds[i]:bounds[i + 1]] for i, p in enumerate(parts) if isinstance(p, Tensor))

    return Tensor._from_op(out, tuple(parts), backward, "concat_rows")


# --- classification heads ---------------------------------------------------

@_quiet
def softmax(x):
    xv = _val(x)
    shifted = xv - np.max(xv, axis=1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        with _quiet:
            return (out * (g - (g * out).sum(axis=1, keepdims=True)),)

    return Tensor._from_op(out, (x,), backward, "softmax")


@_quiet
def cross_entropy(logits, labels, index=None):
    """Mean negative log-likelihood of ``labels`` under row-wise softmax.

    ``index`` restricts the loss to a subset of rows (e.g. the train mask).
    """
    lv = _val(logits)
    labels = np.asarray(labels, dtype=np.int64)
    rows = np.arange(lv.shape[0]) if index is None else np.asarray(index, dtype=np.int64)
    if rows.size == 0:
        raise ContractError("cross_entropy over an empty row set")
    z = lv[rows].astype(np.float64)
    zmax = z.max(axis=1, keepdims=True)
    lse = zmax[:, 0] + np.log(np.exp(z - zmax).sum(axis=1))
    picked = z[np.arange(rows.size), labels[rows]]
    loss = np.asarray(np.mean(lse - picked), dtype=lv.dtype)

    def backward(g):
        probs = np.exp(z - lse[:, None])
        probs[np.arange(rows.size), labels[rows]] -= 1.0
        full = np.zeros_like(lv)
        full[rows] = (probs * (float(g) / rows.size)).astype(lv.dtype)
        return (full,)

    return Tensor._from_op(loss, (logits,), backward, "cross_entropy")


# --- custom ops -------------------------------------------------------------

def custom(value, parents, backward, op="custom"):
    """Record an operation whose backward rule is supplied by the caller.

    ``backward(g)`` must return one gradient per *Tensor* in ``parents``.
    """
    return Tensor._from_op(np.asarray(value), tuple(parents), backward, op)


# --- backward ---------------------------------------------------------------

def _topological(root):
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
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def backward(loss, params=None):
    """Back-propagate from a scalar ``loss``.

    Gradients accumulate into ``.grad`` of every leaf with ``requires_grad``.
    Returns a ``{tensor: gradient}`` dict over the leaves reached, extended
    with exact zeros for any of ``params`` the loss never touched.
    """
    if not isinstance(loss, Tensor):
        raise ContractError("backward() needs a Tensor")
    if loss.value.size != 1:
        raise ContractError(f"backward() root must be scalar, got shape {loss.shape}")
    grads = {id(loss): np.ones_like(loss.value)}
    leaves = {}
    if loss.requires_grad:
        for node in reversed(_topological(loss)):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                leaves[node] = g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if not parent.requires_grad or pg is None:
                    continue
                pg = np.asarray(pg, dtype=parent.value.dtype)
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg
    for leaf, g in leaves.items():
        leaf.grad = g if leaf.grad is None else leaf.grad + g
    result = dict(leaves)
    for p in params or ():
        if p not in result:
            result[p] = np.zeros_like(p.value)
            if p.grad is None:
                p.grad = np.zeros_like(p.value)
    return result
