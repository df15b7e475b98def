"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

The engine is a classic Wengert tape: every operation returns a ``Tensor``
holding its value, its parent nodes, and a vector-Jacobian-product closure.
``backward`` walks the tape once in reverse topological order. Primitives are
matrix-level (matmul, reductions, elementwise transcendentals, a PSD solve),
so tapes stay short even for whole training steps.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable tape construction inside the block (pure forward evaluation)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """A tape node: float64 array plus backward plumbing.

    ``_vjp`` maps the upstream gradient to one gradient per parent (``None``
    for parents that do not require gradient flow).
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp", "_chol")

    def __init__(self, data, requires_grad: bool = False, parents=(), vjp=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = parents
        self._vjp: Callable[[np.ndarray], tuple] | None = vjp
        self._chol = None  # cached factorization, used by solve_psd

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # arithmetic sugar; all dispatch to the module-level ops
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

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, grad={self.requires_grad})"


def parameter(data) -> Tensor:
    """A learnable leaf. ``data`` is copied so callers keep ownership."""
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _tracked(*parents: Tensor) -> bool:
    return _GRAD_ENABLED and any(
        p.requires_grad or p._parents or p._vjp is not None for p in parents
    )


def _make(data, parents, vjp):
    if _tracked(*parents):
        return Tensor(data, parents=parents, vjp=vjp)
    return Tensor(data)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to ``shape``."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data
    return _make(out, (a, b), lambda g: (_unbroadcast(g, a.data.shape),
                                         _unbroadcast(g, b.data.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data
    return _make(out, (a, b), lambda g: (_unbroadcast(g, a.data.shape),
                                         _unbroadcast(-g, b.data.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data
    return _make(out, (a, b), lambda g: (_unbroadcast(g * b.data, a.data.shape),
                                         _unbroadcast(g * a.data, b.data.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    def vjp(g):
        ga = _unbroadcast(g / b.data, a.data.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape)
        return ga, gb
    return _make(out, (a, b), vjp)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data @ b.data
    an, bn = a.data.ndim, b.data.ndim

    def vjp(g):
        if an == 2 and bn == 2:
            return g @ b.data.T, a.data.T @ g
        if an == 1 and bn == 2:  # (n,) @ (n,k) -> (k,)
            return b.data @ g, np.outer(a.data, g)
        if an == 2 and bn == 1:  # (m,n) @ (n,) -> (m,)
            return np.outer(g, b.data), a.data.T @ g
        if an == 1 and bn == 1:  # dot -> scalar
            return g * b.data, g * a.data
        raise ValueError(f"unsupported matmul ranks {an}x{bn}")

    return _make(out, (a, b), vjp)


def transpose(a) -> Tensor:
    a = as_tensor(a)
    return _make(a.data.T, (a,), lambda g: (g.T,))


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.data.shape).copy(),)

    return _make(out, (a,), vjp)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        n = a.data.size
    else:
        n = a.data.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,))


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    out = a.data ** p
    return _make(out, (a,), lambda g: (g * p * a.data ** (p - 1.0),))


def square(a) -> Tensor:
    a = as_tensor(a)
    return _make(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0.0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def clamp(a, lo: float, hi: float) -> Tensor:
    """Clip to [lo, hi]; gradient passes only through the interior."""
    a = as_tensor(a)
    out = np.clip(a.data, lo, hi)
    mask = (a.data >= lo) & (a.data <= hi)
    return _make(out, (a,), lambda g: (g * mask,))


def concat(parts: Sequence, axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        return tuple(
            np.take(g, np.arange(offsets[i], offsets[i + 1]), axis=axis)
            for i in range(len(parts))
        )

    return _make(out, tuple(parts), vjp)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.data.shape),))


def narrow(a, start: int, stop: int) -> Tensor:
    """Contiguous slice along axis 0."""
    a = as_tensor(a)
    out = a.data[start:stop]

    def vjp(g):
        full = np.zeros_like(a.data)
        full[start:stop] = g
        return (full,)

    return _make(out, (a,), vjp)


def gather0(a, idx) -> Tensor:
    """Select entries/rows along axis 0 by integer index array."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.intp)
    out = a.data[idx]

    def vjp(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _make(out, (a,), vjp)


def stop_grad(a) -> Tensor:
    return as_tensor(a).detach()


def solve_psd(a, b, solver=None) -> Tensor:
    """Differentiable X = (A + jitter I)^-1 B for symmetric PSD A.

    ``solver`` must provide ``factor(A)`` and ``solve(factor, B)``; by default
    the jitter-escalating Cholesky route from :mod:`gptraj.psdlinalg` is used.
    The factorization is cached on the A node so repeated solves against the
    same matrix within one tape factor only once.
    """
    from . import psdlinalg  # deferred: psdlinalg imports this module

    a, b = as_tensor(a), as_tensor(b)
    if a._chol is None:
        a._chol = psdlinalg.cholesky_factor(a.data)
    factor = a._chol
    vec = b.data.ndim == 1
    rhs = b.data[:, None] if vec else b.data
    x = psdlinalg.solve_with_factor(factor, rhs)
    out = x[:, 0] if vec else x

    def vjp(g):
        gm = g[:, None] if vec else g
        gb = psdlinalg.solve_with_factor(factor, gm)
        ga = -gb @ x.T
        return ga, (gb[:, 0] if vec else gb)

    return _make(out, (a, b), vjp)


def backward(root: Tensor) -> None:
    """Accumulate gradients of a scalar ``root`` into every tape leaf."""
    if root.data.ndim != 0:
        raise ValueError("backward expects a scalar loss")
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))

    root.grad = np.ones_like(root.data)
    for node in reversed(topo):
        if node._vjp is None or node.grad is None:
            continue
        for p, g in zip(node._parents, node._vjp(node.grad)):
            if g is None:
                continue
            if p.grad is None:
                p.grad = np.zeros_like(p.data)
            p.grad += g


def grad(loss: Tensor, params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    """Gradient map of a scalar loss for the named parameters.

    Parameters absent from the tape get zero gradients. Existing ``.grad``
    buffers on the parameters are reset first.
    """
    if not np.isfinite(loss.data):
        raise FloatingPointError("non-finite loss")
    for p in params.values():
        p.grad = None
    backward(loss)
    return {
        name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
        for name, p in params.items()
    }
