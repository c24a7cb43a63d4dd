"""Minimal dense tensor with reverse-mode automatic differentiation.

Everything is double precision. A Tensor wraps a numpy array plus an
optional link into the (acyclic) differentiation graph. Graph construction
and backward over one graph are single-threaded; distinct graphs may be
used from distinct threads freely.
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class NumericError(ArithmeticError):
    """Raised on non-finite inputs where finiteness is required."""


def _as_array(values) -> np.ndarray:
    return np.asarray(values, dtype=np.float64)


class Tensor:
    """Dense float64 array participating in a differentiation graph.

    ``grad`` is populated (on leaf tensors with ``requires_grad``) by
    :meth:`backward`. Repeated backward calls without resetting ``grad``
    accumulate additively.
    """

    __slots__ = ("values", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, values, requires_grad=False, _parents=(), _backward=None):
        self.values = _as_array(values)
        self.grad = None
        self._parents = tuple(_parents)
        self._backward = _backward
        self.requires_grad = bool(requires_grad) or any(
            p.requires_grad for p in self._parents
        )

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self):
        return self.values.shape

    @property
    def size(self):
        return self.values.size

    def __repr__(self):
        return f"Tensor(shape={self.values.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def is_leaf(self):
        return not self._parents

    # -- operator sugar ------------------------------------------------------

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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    # -- backward ------------------------------------------------------------

    def backward(self):
        """Accumulate reverse-mode gradients for every reachable leaf.

        The seed must be a scalar (single element) tensor.
        """
        if self.values.size != 1:
            raise ShapeError(
                f"backward seed must be scalar, got shape {self.values.shape}"
            )
        order = _topo_order(self)
        pending = {id(self): np.ones_like(self.values)}
        for node in order:
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf() and node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            if node._backward is None:
                continue
            for parent, pg in node._backward(g):
                if not parent.requires_grad:
                    continue
                key = id(parent)
                if key in pending:
                    pending[key] = pending[key] + pg
                else:
                    pending[key] = pg


def _topo_order(root: Tensor):
    """Reverse topological order (root first) via iterative DFS."""
    order = []
    seen = set()
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return list(reversed(order))


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Reduce a broadcasted gradient back to ``shape``."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad.reshape(shape)


# -- elementwise arithmetic (numpy broadcasting rules) -------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_values = a.values + b.values

    def bwd(g):
        return [(a, _unbroadcast(g, a.shape)), (b, _unbroadcast(g, b.shape))]

    return Tensor(out_values, _parents=(a, b), _backward=bwd)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_values = a.values - b.values

    def bwd(g):
        return [(a, _unbroadcast(g, a.shape)), (b, _unbroadcast(-g, b.shape))]

    return Tensor(out_values, _parents=(a, b), _backward=bwd)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_values = a.values * b.values

    def bwd(g):
        return [
            (a, _unbroadcast(g * b.values, a.shape)),
            (b, _unbroadcast(g * a.values, b.shape)),
        ]

    return Tensor(out_values, _parents=(a, b), _backward=bwd)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_values = a.values / b.values

    def bwd(g):
        return [
            (a, _unbroadcast(g / b.values, a.shape)),
            (b, _unbroadcast(-g * a.values / (b.values * b.values), b.shape)),
        ]

    return Tensor(out_values, _parents=(a, b), _backward=bwd)


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out_values = np.sqrt(a.values)

    def bwd(g):
        return [(a, g * 0.5 / out_values)]

    return Tensor(out_values, _parents=(a,), _backward=bwd)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out_values = np.exp(a.values)

    def bwd(g):
        return [(a, g * out_values)]

    return Tensor(out_values, _parents=(a,), _backward=bwd)


def log(a) -> Tensor:
    a = as_tensor(a)
    out_values = np.log(a.values)

    def bwd(g):
        return [(a, g / a.values)]

    return Tensor(out_values, _parents=(a,), _backward=bwd)


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.values > 0.0
    out_values = np.where(mask, a.values, 0.0)

    def bwd(g):
        return [(a, g * mask)]

    return Tensor(out_values, _parents=(a,), _backward=bwd)


# -- linear algebra ------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.values.ndim != 2 or b.values.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(
            f"matmul dimension mismatch: {a.shape} @ {b.shape}"
        )
    out_values = a.values @ b.values

    def bwd(g):
        return [(a, g @ b.values.T), (b, a.values.T @ g)]

    return Tensor(out_values, _parents=(a, b), _backward=bwd)


def transpose(a) -> Tensor:
    a = as_tensor(a)

    def bwd(g):
        return [(a, g.T)]

    return Tensor(a.values.T, _parents=(a,), _backward=bwd)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old_shape = a.shape

    def bwd(g):
        return [(a, g.reshape(old_shape))]

    return Tensor(a.values.reshape(shape), _parents=(a,), _backward=bwd)


def concat(tensors, axis=0) -> Tensor:
    """Concatenate tensors along ``axis``."""
    tensors = [as_tensor(t) for t in tensors]
    out_values = np.concatenate([t.values for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        pieces = np.split(g, splits, axis=axis)
        return list(zip(tensors, pieces))

    return Tensor(out_values, _parents=tuple(tensors), _backward=bwd)


def gather_rows(a, indices) -> Tensor:
    """Select rows of a 2D tensor by an index list (repeats allowed)."""
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.intp)
    out_values = a.values[idx]

    def bwd(g):
        acc = np.zeros_like(a.values)
        np.add.at(acc, idx, g)
        return [(a, acc)]

    return Tensor(out_values, _parents=(a,), _backward=bwd)


def repeat_rows(a, k) -> Tensor:
    """Repeat each row of a 2D tensor k times (RP operator)."""
    a = as_tensor(a)
    idx = np.repeat(np.arange(a.shape[0]), k)
    return gather_rows(a, idx)


# -- reductions ----------------------------------------------------------------


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out_values = a.values.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            return [(a, np.broadcast_to(g, a.shape).copy())]
        gg = g if keepdims else np.expand_dims(g, axis)
        return [(a, np.broadcast_to(gg, a.shape).copy())]

    return Tensor(out_values, _parents=(a,), _backward=bwd)


def tmean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    n = a.size if axis is None else a.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def tmax(a, axis=0, keepdims=False) -> Tensor:
    """Max reduction. Ties route gradient to the smallest index along
    ``axis``, so backward moves exactly one unit per output coordinate."""
    a = as_tensor(a)
    arg = np.argmax(a.values, axis=axis)  # argmax picks the first maximum
    out_values = np.take_along_axis(
        a.values, np.expand_dims(arg, axis), axis=axis
    )
    if not keepdims:
        out_values = np.squeeze(out_values, axis=axis)

    def bwd(g):
        gg = g if keepdims else np.expand_dims(g, axis)
        acc = np.zeros_like(a.values)
        np.put_along_axis(acc, np.expand_dims(arg, axis), gg, axis=axis)
        return [(a, acc)]

    return Tensor(out_values, _parents=(a,), _backward=bwd)


# -- softmax family --------------------------------------------------------------


def softmax(a, axis=-1) -> Tensor:
    """Numerically stable softmax along ``axis``.

    Along the chosen axis outputs are positive, sum to 1 and are invariant
    under adding a constant to any slice.
    """
    a = as_tensor(a)
    if not np.isfinite(a.values).all():
        raise NumericError("softmax input contains non-finite entries")
    shifted = a.values - a.values.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * s).sum(axis=axis, keepdims=True)
        return [(a, s * (g - dot))]

    return Tensor(s, _parents=(a,), _backward=bwd)


def log_softmax(a, axis=-1) -> Tensor:
    a = as_tensor(a)
    if not np.isfinite(a.values).all():
        raise NumericError("log_softmax input contains non-finite entries")
    shifted = a.values - a.values.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out_values = shifted - lse
    s = np.exp(out_values)

    def bwd(g):
        return [(a, g - s * g.sum(axis=axis, keepdims=True))]

    return Tensor(out_values, _parents=(a,), _backward=bwd)


def softmax_axis(a, axis: str) -> Tensor:
    """Softmax along named axis of a matrix: "rows" normalizes each row,
    "cols" each column."""
    if axis not in ("rows", "cols"):
        raise ValueError(f"axis must be 'rows' or 'cols', got {axis!r}")
    return softmax(a, axis=1 if axis == "rows" else 0)


def dropout(a, p, rng, training=True) -> Tensor:
    """Inverted dropout: training-mode mask with keep-probability scaling;
    identity in inference mode."""
    a = as_tensor(a)
    if not training or p == 0.0:
        return a
    keep = 1.0 - p
    mask = (rng.random(a.shape) < keep) / keep

    def bwd(g):
        return [(a, g * mask)]

    return Tensor(a.values * mask, _parents=(a,), _backward=bwd)


# -- gradient checking -----------------------------------------------------------


def gradcheck(f, x: Tensor, eps: float = 1e-5, coords=None) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps a Tensor to a scalar Tensor. ``coords`` optionally restricts
    the check to a subset of flat coordinate indices (all by default).
    The relative-error denominator is max(|analytic|, |numeric|, 1e-8).
    """
    if not (1e-7 <= eps <= 1e-3):
        raise ValueError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    probe = Tensor(x.values.copy(), requires_grad=True)
    out = f(probe)
    out.backward()
    analytic = (
        np.zeros_like(probe.values) if probe.grad is None else probe.grad
    ).ravel()

    flat = probe.values.ravel()
    if coords is None:
        coords = range(flat.size)
    max_err = 0.0
    for i in coords:
        orig = flat[i]
        flat[i] = orig + eps
        f_plus = float(f(probe).values)
        flat[i] = orig - eps
        f_minus = float(f(probe).values)
        flat[i] = orig
        numeric = (f_plus - f_minus) / (2.0 * eps)
        denom = max(abs(analytic[i]), abs(numeric), 1e-8)
        max_err = max(max_err, abs(analytic[i] - numeric) / denom)
    return max_err
