"""Reverse-mode automatic differentiation on NumPy arrays.

A ``Tensor`` wraps an ``np.ndarray`` and records the operations applied to it
in a define-by-run graph.  Calling :meth:`Tensor.backward` on a scalar result
walks the graph in reverse topological order and accumulates gradients into
every reachable tensor created with ``requires_grad=True``.

Design constraints, enforced rather than assumed:

* default dtype is float32; float64 is supported end to end so gradient
  checks can run at high precision,
* broadcasting is restricted: elementwise ops accept equal shapes or a
  Python scalar; the only array-vs-array broadcast is :func:`add_bcast`,
  which adds a lower-rank tensor over leading axes (bias rows, positional
  tables),
* ``backward`` requires a scalar root and may be called once per graph,
* gradients accumulate (``+=``), so shared subexpressions are handled by
  the topological walk without double counting.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf as _erf

DEFAULT_DTYPE = np.float32

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


class ShapeError(ValueError):
    """Raised when operand shapes violate the restricted broadcasting rules."""


class TapeError(RuntimeError):
    """Raised on invalid use of the autodiff tape (non-scalar root, reuse)."""


_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the ``with`` block (pure inference)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _as_array(data, dtype) -> np.ndarray:
    if isinstance(data, np.ndarray):
        if dtype is None:
            if data.dtype in (np.float32, np.float64):
                return data
            return data.astype(DEFAULT_DTYPE)
        return data.astype(dtype, copy=False)
    arr = np.asarray(data, dtype=dtype if dtype is not None else DEFAULT_DTYPE)
    return arr


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp", "_used")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable[[np.ndarray], tuple] | None = None
        self._used = False

    # ------------------------------------------------------------------
    # introspection
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}{flag})"

    # ------------------------------------------------------------------
    # graph construction
    @staticmethod
    def _make(data: np.ndarray, parents: tuple["Tensor", ...], vjp) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        out._used = False
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._vjp = vjp
        else:
            out.requires_grad = False
            out._parents = ()
            out._vjp = None
        return out

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every leaf.

        ``self`` must be a scalar (size 1).  A graph may only be traversed
        once; build a fresh forward pass for each backward call.
        """
        if self.size != 1:
            raise TapeError(f"backward requires a scalar root, got shape {self.shape}")
        if self._used:
            raise TapeError("backward called twice on the same graph")
        if not self.requires_grad:
            raise TapeError("root does not require grad; nothing to differentiate")

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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
            node._used = True

        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._vjp is None or node.grad is None:
                continue
            grads = node._vjp(node.grad)
            for parent, g in zip(node._parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = np.zeros_like(parent.data)
                parent.grad += g
            # free intermediate buffers eagerly
            if node is not self:
                node.grad = None
            node._vjp = None
            node._parents = ()

    # ------------------------------------------------------------------
    # elementwise arithmetic
    def _coerce(self, other) -> tuple["Tensor", bool]:
        """Return (tensor, is_scalar).  Scalars are Python numbers."""
        if isinstance(other, Tensor):
            if other.dtype != self.dtype:
                raise ShapeError(f"dtype mismatch: {self.dtype} vs {other.dtype}")
            if other.shape != self.shape and other.size != 1 and self.size != 1:
                raise ShapeError(
                    f"elementwise op needs equal shapes or a scalar, got "
                    f"{self.shape} vs {other.shape}"
                )
            return other, other.size == 1
        if isinstance(other, (int, float, np.floating, np.integer)):
            return Tensor(np.asarray(other, dtype=self.dtype)), True
        raise TypeError(f"cannot combine Tensor with {type(other).__name__}")

    def __add__(self, other):
        b, _ = self._coerce(other)
        return Tensor._make(
            self.data + b.data,
            (self, b),
            lambda g: (_reduce_to(g, self.shape), _reduce_to(g, b.shape)),
        )

    __radd__ = __add__

    def __sub__(self, other):
        b, _ = self._coerce(other)
        return Tensor._make(
            self.data - b.data,
            (self, b),
            lambda g: (_reduce_to(g, self.shape), _reduce_to(-g, b.shape)),
        )

    def __rsub__(self, other):
        b, _ = self._coerce(other)
        return b.__sub__(self)

    def __mul__(self, other):
        b, _ = self._coerce(other)
        return Tensor._make(
            self.data * b.data,
            (self, b),
            lambda g: (
                _reduce_to(g * b.data, self.shape),
                _reduce_to(g * self.data, b.shape),
            ),
        )

    __rmul__ = __mul__

    def __truediv__(self, other):
        b, _ = self._coerce(other)
        inv = 1.0 / b.data
        return Tensor._make(
            self.data * inv,
            (self, b),
            lambda g: (
                _reduce_to(g * inv, self.shape),
                _reduce_to(-g * self.data * inv * inv, b.shape),
            ),
        )

    def __neg__(self):
        return Tensor._make(-self.data, (self,), lambda g: (-g,))

    def __matmul__(self, other):
        return matmul(self, other)

    # ------------------------------------------------------------------
    # elementwise functions
    def exp(self):
        y = np.exp(self.data)
        return Tensor._make(y, (self,), lambda g: (g * y,))

    def log(self):
        return Tensor._make(np.log(self.data), (self,), lambda g: (g / self.data,))

    def sqrt(self):
        y = np.sqrt(self.data)
        return Tensor._make(y, (self,), lambda g: (g * (0.5 / y),))

    def square(self):
        return Tensor._make(
            np.square(self.data), (self,), lambda g: (g * (2.0 * self.data),)
        )

    def tanh(self):
        y = np.tanh(self.data)
        return Tensor._make(y, (self,), lambda g: (g * (1.0 - y * y),))

    def sigmoid(self):
        y = 1.0 / (1.0 + np.exp(-self.data))
        return Tensor._make(y, (self,), lambda g: (g * y * (1.0 - y),))

    def elu(self, alpha: float = 1.0):
        x = self.data
        neg = alpha * np.expm1(np.minimum(x, 0.0))
        y = np.where(x > 0.0, x, neg).astype(x.dtype)
        dy = np.where(x > 0.0, np.asarray(1.0, x.dtype), neg + alpha)
        return Tensor._make(y, (self,), lambda g: (g * dy,))

    def gelu(self):
        # exact form: x * Phi(x) with Phi the standard normal CDF
        x = self.data
        cdf = 0.5 * (1.0 + _erf(x * _INV_SQRT2))
        y = (x * cdf).astype(x.dtype)
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
        dy = (cdf + x * pdf).astype(x.dtype)
        return Tensor._make(y, (self,), lambda g: (g * dy,))

    def clip(self, lo: float, hi: float):
        mask = ((self.data >= lo) & (self.data <= hi)).astype(self.dtype)
        return Tensor._make(
            np.clip(self.data, lo, hi), (self,), lambda g: (g * mask,)
        )

    # ------------------------------------------------------------------
    # reductions
    def sum(self, axis=None, keepdims: bool = False):
        y = self.data.sum(axis=axis, keepdims=keepdims)
        shape = self.shape

        def vjp(g):
            return (_unreduce(g, shape, axis, keepdims),)

        return Tensor._make(np.asarray(y, dtype=self.dtype), (self,), vjp)

    def mean(self, axis=None, keepdims: bool = False):
        y = self.data.mean(axis=axis, keepdims=keepdims)
        shape = self.shape
        n = self.size if axis is None else _axis_size(shape, axis)
        inv = 1.0 / n

        def vjp(g):
            return (_unreduce(g, shape, axis, keepdims) * inv,)

        return Tensor._make(np.asarray(y, dtype=self.dtype), (self,), vjp)

    # ------------------------------------------------------------------
    # shape manipulation
    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        return Tensor._make(
            self.data.reshape(shape), (self,), lambda g: (g.reshape(old),)
        )

    def transpose(self, axes: Sequence[int]):
        axes = tuple(axes)
        inv = tuple(np.argsort(axes))
        return Tensor._make(
            np.ascontiguousarray(self.data.transpose(axes)),
            (self,),
            lambda g: (g.transpose(inv),),
        )

    def __getitem__(self, idx):
        if not _is_basic_index(idx):
            raise ShapeError("only int/slice (and tuples thereof) indexing is supported")
        y = self.data[idx]
        shape = self.shape

        def vjp(g):
            full = np.zeros(shape, dtype=g.dtype)
            full[idx] = g
            return (full,)

        return Tensor._make(np.ascontiguousarray(y), (self,), vjp)


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, np.integer, slice)) or i is Ellipsis for i in items)


def _axis_size(shape: tuple[int, ...], axis) -> int:
    if isinstance(axis, int):
        return shape[axis]
    n = 1
    for a in axis:
        n *= shape[a]
    return n


def _unreduce(g, shape, axis, keepdims) -> np.ndarray:
    """Broadcast a reduced gradient back to the pre-reduction shape."""
    g = np.asarray(g)
    if axis is None:
        return np.broadcast_to(g, shape).astype(g.dtype, copy=True)
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    axes = tuple(a % len(shape) for a in axes)
    if not keepdims:
        for a in sorted(axes):
            g = np.expand_dims(g, a)
    return np.broadcast_to(g, shape).astype(g.dtype, copy=True)


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient down to ``shape`` (handles the scalar-operand case)."""
    if g.shape == shape:
        return g
    return g.sum().reshape(shape) if shape in ((), (1,)) else g.sum(axis=0).reshape(shape)


# ----------------------------------------------------------------------
# binary / n-ary module-level ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product: 2-D by 2-D, or stacked with equal leading dims.

    Accepted shapes: ``(m, k) @ (k, n)`` and ``(..., m, k) @ (..., k, n)``
    with identical ``...``.  General broadcasting is intentionally absent.
    """
    if a.dtype != b.dtype:
        raise ShapeError(f"dtype mismatch: {a.dtype} vs {b.dtype}")
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul operands must have ndim >= 2")
    if a.ndim != b.ndim or (a.ndim > 2 and a.shape[:-2] != b.shape[:-2]):
        raise ShapeError(f"matmul leading dims must match: {a.shape} vs {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} vs {b.shape}")

    def vjp(g):
        ga = g @ _swap(b.data)
        gb = _swap(a.data) @ g
        return ga, gb

    return Tensor._make(a.data @ b.data, (a, b), vjp)


def _swap(x: np.ndarray) -> np.ndarray:
    return np.swapaxes(x, -1, -2)


def add_bcast(x: Tensor, t: Tensor) -> Tensor:
    """Add a lower-rank tensor broadcast over the leading axes of ``x``.

    ``t.shape`` must equal ``x.shape[x.ndim - t.ndim:]``.  This is the one
    sanctioned array-vs-array broadcast (bias rows, positional tables).
    """
    if x.dtype != t.dtype:
        raise ShapeError(f"dtype mismatch: {x.dtype} vs {t.dtype}")
    if t.ndim > x.ndim or x.shape[x.ndim - t.ndim:] != t.shape:
        raise ShapeError(f"cannot broadcast {t.shape} over trailing dims of {x.shape}")
    lead = tuple(range(x.ndim - t.ndim))

    def vjp(g):
        gt = g.sum(axis=lead) if lead else g
        return g, gt

    return Tensor._make(x.data + t.data, (x, t), vjp)


def minimum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise minimum; on ties the gradient routes to ``a``."""
    if isinstance(b, (int, float)):
        b = Tensor(np.full_like(a.data, b))
    if a.shape != b.shape:
        raise ShapeError(f"minimum needs equal shapes, got {a.shape} vs {b.shape}")
    take_a = a.data <= b.data
    mask = take_a.astype(a.dtype)

    def vjp(g):
        return g * mask, g * (1.0 - mask)

    return Tensor._make(np.where(take_a, a.data, b.data), (a, b), vjp)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stabilized softmax (max subtraction) as a primitive.

    Backward uses dx = (g - sum(g * y, axis)) * y.
    """
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return ((g - dot) * y,)

    return Tensor._make(y, (x,), vjp)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the trailing axis to zero mean / unit variance, then affine."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"gain/bias must have shape ({d},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = xhat * gain.data + bias.data

    def vjp(g):
        lead = tuple(range(g.ndim - 1))
        g_gain = (g * xhat).sum(axis=lead)
        g_bias = g.sum(axis=lead)
        gx = g * gain.data
        m1 = gx.mean(axis=-1, keepdims=True)
        m2 = (gx * xhat).mean(axis=-1, keepdims=True)
        dx = inv * (gx - m1 - xhat * m2)
        return dx, g_gain, g_bias

    return Tensor._make(y, (x, gain, bias), vjp)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Concatenate along ``axis``; all other dims must agree."""
    tensors = list(tensors)
    base = tensors[0]
    for t in tensors[1:]:
        if t.ndim != base.ndim or t.dtype != base.dtype:
            raise ShapeError("concat operands must share ndim and dtype")
        for ax in range(base.ndim):
            if ax != axis % base.ndim and t.shape[ax] != base.shape[ax]:
                raise ShapeError(
                    f"concat shapes differ off-axis: {base.shape} vs {t.shape}"
                )
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return Tensor._make(
        np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), vjp
    )


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Stack equal-shape tensors along a new axis."""
    tensors = list(tensors)
    for t in tensors[1:]:
        if t.shape != tensors[0].shape:
            raise ShapeError("stack needs equal shapes")

    def vjp(g):
        parts = np.split(g, len(tensors), axis=axis)
        return tuple(np.ascontiguousarray(p).reshape(t.shape) for p, t in zip(parts, tensors))

    return Tensor._make(
        np.stack([t.data for t in tensors], axis=axis), tuple(tensors), vjp
    )


# ----------------------------------------------------------------------
# finite differences


def fd_gradients(
    f: Callable[[], Tensor],
    params: Iterable[Tensor],
    eps: float = 1e-5,
) -> list[np.ndarray]:
    """Central finite-difference gradient of scalar ``f()`` w.r.t. ``params``.

    ``f`` must recompute the forward pass from the current parameter values.
    Intended for float64 parameters; eps is applied per element.
    """
    grads: list[np.ndarray] = []
    for p in params:
        g = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            with no_grad():
                hi = float(f().data)
            flat[i] = orig - eps
            with no_grad():
                lo = float(f().data)
            flat[i] = orig
            gflat[i] = (hi - lo) / (2.0 * eps)
        grads.append(g)
    return grads
