"""Reverse-mode automatic differentiation over dense float64 numpy arrays.

Each operation on a :class:`Tensor` that depends on a ``requires_grad`` input
records its parents and a pullback closure. :meth:`Tensor.backward` walks the
resulting graph in reverse topological order and accumulates gradients into
the leaves. The graph is rebuilt on every forward pass.

>>> x = Tensor(3.0, requires_grad=True)
>>> (x * x).backward()
>>> float(x.grad)
6.0
"""

import contextlib
import contextvars
import logging

import numpy as np
from scipy.linalg import lapack, solve_triangular

from .errors import (
    ContractError,
    DecompositionError,
    DimensionError,
    NumericDomainError,
    SingularMatrixError,
)

logger = logging.getLogger(__name__)

_grad_enabled = contextvars.ContextVar("grad_enabled", default=True)


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording a graph."""
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


class Tensor:
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad=False, name=None, _parents=(), _pullback=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name
        self._parents = _parents
        self._pullback = _pullback

    # -- introspection -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def is_leaf(self):
        return self._pullback is None

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{tag})"

    def __len__(self):
        return len(self.data)

    # -- reverse pass --------------------------------------------------
    def backward(self):
        if self.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            return
        order = _topological_order(self)
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._pullback(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                pg = _unbroadcast(np.asarray(pg, dtype=np.float64), parent.shape)
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg

    # -- operators -----------------------------------------------------
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
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def swapaxes(self, a, b):
        return swapaxes(self, a, b)


def _topological_order(root):
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
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, pullback):
    if _grad_enabled.get() and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=parents, _pullback=pullback)
    return Tensor(data)


def _check_broadcast(a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise DimensionError(f"cannot broadcast {a.shape} with {b.shape}") from exc


# -- elementwise -------------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)
    return _make(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)
    return _make(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)
    return _make(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)
    out = a.data / b.data
    return _make(out, (a, b), lambda g: (g / b.data, -g * out / b.data))


def neg(a):
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def power(a, exponent):
    a = as_tensor(a)
    p = float(exponent)
    return _make(a.data**p, (a,), lambda g: (g * p * a.data ** (p - 1),))


def square(a):
    a = as_tensor(a)
    return _make(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a):
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise NumericDomainError("log of a non-positive value")
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a):
    a = as_tensor(a)
    if np.any(a.data < 0):
        raise NumericDomainError("sqrt of a negative value")
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (0.5 * g / out,))


def maximum(a, floor):
    """Clamp ``a`` from below at the constant ``floor``; gradient is zero where clamped."""
    a = as_tensor(a)
    keep = a.data >= floor
    return _make(np.where(keep, a.data, floor), (a,), lambda g: (g * keep,))


# -- reductions and shape ----------------------------------------------------

def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def pullback(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return _make(out, (a,), pullback)


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    count = a.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    return tsum(a, axis=axis, keepdims=keepdims) / float(count)


def broadcast_to(a, shape):
    a = as_tensor(a)
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError as exc:
        raise DimensionError(f"cannot broadcast {a.shape} to {shape}") from exc
    return _make(out, (a,), lambda g: (g,))


def reshape(a, shape):
    a = as_tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None):
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = np.argsort(axes)
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),))


def swapaxes(a, ax1, ax2):
    a = as_tensor(a)
    return _make(np.swapaxes(a.data, ax1, ax2), (a,), lambda g: (np.swapaxes(g, ax1, ax2),))


def getitem(a, index):
    a = as_tensor(a)

    def pullback(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _make(a.data[index], (a,), pullback)


def concatenate(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return _make(out, tuple(tensors), lambda g: tuple(np.split(g, sizes, axis=axis)))


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)
    n = len(tensors)
    return _make(out, tuple(tensors), lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)))


def tril(a, k=0):
    a = as_tensor(a)
    mask = np.tril(np.ones(a.shape[-2:], dtype=bool), k)
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (np.where(mask, g, 0.0),))


def diagonal(a):
    """Diagonal over the last two axes."""
    a = as_tensor(a)
    n = a.shape[-1]
    idx = np.arange(n)

    def pullback(g):
        full = np.zeros_like(a.data)
        full[..., idx, idx] = g
        return (full,)

    return _make(np.diagonal(a.data, axis1=-2, axis2=-1).copy(), (a,), pullback)


def diag_embed(v):
    """Place the last axis of ``v`` on the diagonal of a new trailing square block."""
    v = as_tensor(v)
    n = v.shape[-1]
    idx = np.arange(n)
    out = np.zeros(v.shape + (n,))
    out[..., idx, idx] = v.data
    return _make(out, (v,), lambda g: (g[..., idx, idx],))


# -- linear algebra ----------------------------------------------------------

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul operands must be at least 2-D")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    try:
        out = a.data @ b.data
    except ValueError as exc:
        raise DimensionError(str(exc)) from exc

    def pullback(g):
        ga = gb = None
        # a 2-D operand shared across a batch: fold the batch into one GEMM
        if a.requires_grad:
            if a.ndim == 2 and g.ndim > 2:
                g2 = np.moveaxis(g, -2, 0).reshape(g.shape[-2], -1)
                b2 = np.moveaxis(np.broadcast_to(b.data, g.shape[:-2] + b.shape[-2:]), -2, 0)
                ga = g2 @ b2.reshape(b.shape[-2], -1).T
            else:
                ga = g @ np.swapaxes(b.data, -1, -2)
        if b.requires_grad:
            if b.ndim == 2 and g.ndim > 2:
                a2 = np.broadcast_to(a.data, g.shape[:-2] + a.shape[-2:]).reshape(-1, a.shape[-1])
                gb = a2.T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    return _make(out, (a, b), pullback)


def _phi(x):
    out = np.tril(x)
    out[np.diag_indices_from(out)] *= 0.5
    return out


def _potrf(a):
    chol, info = lapack.dpotrf(a, lower=1, clean=1, overwrite_a=0)
    return chol, info


def cholesky(a, jitter=0.0, max_jitter=None):
    """Lower Cholesky factor of ``sym(a) + jitter * I``.

    If the factorisation fails, jitter escalates by factors of ten starting at
    ``1e-6 * mean(diag)`` until ``max_jitter`` (default ``1e-2 * mean(diag)``).
    The input is symmetrised so the gradient is symmetric.
    """
    a = as_tensor(a)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionError(f"cholesky needs a square matrix, got {a.shape}")
    n = a.shape[0]
    sym = 0.5 * (a.data + a.data.T)
    scale = float(np.mean(np.diag(sym))) if n else 0.0
    scale = scale if scale > 0 else 1.0
    if max_jitter is None:
        max_jitter = 1e-2 * scale
    attempts = [float(jitter)]
    level = 1e-6 * scale
    while level <= max_jitter * (1 + 1e-12):
        if level > attempts[-1]:
            attempts.append(level)
        level *= 10.0
    chol, info = None, -1
    for i, jit in enumerate(attempts):
        if i > 0:
            logger.info("cholesky: escalating jitter to %.3g", jit)
        chol, info = _potrf(sym + jit * np.eye(n))
        if info == 0 and np.all(np.isfinite(chol)):
            break
    else:
        pivot = int(info) if info > 0 else None
        raise DecompositionError(
            f"matrix not positive definite at pivot {pivot} with jitter {attempts[-1]:.3g}",
            pivot=pivot,
        )

    def pullback(g):
        p = _phi(chol.T @ g)
        s = solve_triangular(chol, solve_triangular(chol, p.T, lower=True, trans="T").T,
                             lower=True, trans="T")
        # s == L^-T P L^-1
        return (0.5 * (s + s.T),)

    return _make(chol, (a,), pullback)


def trisolve(l, b):
    """Solve ``l @ x = b`` for lower-triangular ``l``.

    ``b`` may carry leading batch axes, ``(..., n, k)``.
    """
    l, b = as_tensor(l), as_tensor(b)
    if l.ndim != 2 or l.shape[0] != l.shape[1]:
        raise DimensionError(f"trisolve needs a square factor, got {l.shape}")
    if b.ndim < 2 or b.shape[-2] != l.shape[0]:
        raise DimensionError(f"trisolve shape mismatch: {l.shape} vs {b.shape}")
    if np.any(np.diag(l.data) == 0):
        raise SingularMatrixError("triangular factor has a zero diagonal entry")
    n = l.shape[0]
    batch = b.shape[:-2]
    flat = np.moveaxis(b.data, -2, 0).reshape(n, -1)
    x_flat = solve_triangular(l.data, flat, lower=True, check_finite=False)
    x = np.moveaxis(x_flat.reshape((n,) + batch + (b.shape[-1],)), 0, -2)

    def pullback(g):
        g_flat = np.moveaxis(g, -2, 0).reshape(n, -1)
        gb_flat = solve_triangular(l.data, g_flat, lower=True, trans="T", check_finite=False)
        gl = -np.tril(gb_flat @ x_flat.T) if l.requires_grad else None
        gb = np.moveaxis(gb_flat.reshape((n,) + batch + (b.shape[-1],)), 0, -2)
        return gl, gb

    return _make(x, (l, b), pullback)


def numerical_gradient(f, x, step=1e-5):
    """Central finite-difference gradient of scalar ``f`` at array ``x``."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = x[i]
        x[i] = orig + step
        up = float(f(x))
        x[i] = orig - step
        down = float(f(x))
        x[i] = orig
        grad[i] = (up - down) / (2 * step)
    return grad
