"""Dense float64 tensors of rank <= 3 with reverse-mode automatic differentiation.

The op set is exactly what the fusion pipeline needs: broadcast elementwise
arithmetic, 2-D matmul, reductions, a few activations, numerically stable
softmax, layer normalization, and the structural ops concat / narrow /
gather_rows.  Each op output records its parent tensors and a backward rule;
``Tensor.backward()`` walks the recorded graph once in reverse topological
order, accumulating gradients additively across fan-out.

Contract enforced throughout:
  * tensors are immutable after creation except for the ``grad`` slot
  * every op result must be finite; NaN or Inf raises ``NonFiniteError``
  * gradients flow only toward tensors created with ``requires_grad=True``
"""
from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "NonFiniteError",
    "as_tensor",
    "concat",
    "narrow",
    "gather_rows",
    "softmax",
    "layernorm",
]

MAX_RANK = 3


class ShapeError(ValueError):
    """Operand extents incompatible with the requested operation."""


class NonFiniteError(FloatingPointError):
    """A tensor value left the finite range (NaN or Inf)."""


def _as_array(data) -> np.ndarray:
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim > MAX_RANK:
        raise ShapeError(f"rank {arr.ndim} exceeds the supported maximum of {MAX_RANK}")
    return np.ascontiguousarray(arr)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape``, undoing numpy broadcasting."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A rank <= 3 float64 array, optionally tracked by the autodiff graph.

    ``_parents`` and ``_backward`` are the graph record: ``_backward`` maps the
    output gradient to one gradient per parent (``None`` for non-differentiable
    inputs).  Leaves have an empty record.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None):
        self.data = _as_array(data)
        if not np.isfinite(self.data).all():
            raise NonFiniteError("tensor contains NaN or Inf")
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward = _backward

    # -- introspection ----------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() requires a single element, got shape {self.shape}")
        return float(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- graph ------------------------------------------------------------

    def backward(self) -> None:
        """Backpropagate from this scalar through the recorded graph."""
        if self.data.size != 1:
            raise ShapeError("backward() requires a scalar output")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is None or node.grad is None:
                continue
            for parent, g in zip(node._parents, node._backward(node.grad)):
                if g is None or not parent.requires_grad:
                    continue
                g = np.ascontiguousarray(g, dtype=np.float64)
                parent.grad = g if parent.grad is None else parent.grad + g

    # -- elementwise arithmetic -------------------------------------------

    def __add__(self, other):
        other = as_tensor(other)
        sa, sb = self.shape, other.shape
        return _op(self.data + other.data, (self, other),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))

    __radd__ = __add__

    def __sub__(self, other):
        other = as_tensor(other)
        sa, sb = self.shape, other.shape
        return _op(self.data - other.data, (self, other),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))

    def __rsub__(self, other):
        return as_tensor(other) - self

    def __mul__(self, other):
        other = as_tensor(other)
        sa, sb = self.shape, other.shape
        a, b = self.data, other.data
        return _op(a * b, (self, other),
                   lambda g: (_unbroadcast(g * b, sa), _unbroadcast(g * a, sb)))

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other)
        sa, sb = self.shape, other.shape
        a, b = self.data, other.data
        return _op(a / b, (self, other),
                   lambda g: (_unbroadcast(g / b, sa), _unbroadcast(-g * a / (b * b), sb)))

    def __rtruediv__(self, other):
        return as_tensor(other) / self

    def __neg__(self):
        return _op(-self.data, (self,), lambda g: (-g,))

    def __pow__(self, exponent):
        if not isinstance(exponent, (int, float)):
            raise TypeError("only scalar exponents are supported")
        p = float(exponent)
        x = self.data
        return _op(x ** p, (self,), lambda g: (g * p * x ** (p - 1.0),))

    def __matmul__(self, other):
        other = as_tensor(other)
        if self.ndim != 2 or other.ndim != 2:
            raise ShapeError(
                f"matmul expects two rank-2 tensors, got ranks {self.ndim} and {other.ndim}")
        if self.shape[1] != other.shape[0]:
            raise ShapeError(
                f"matmul inner extents disagree: {self.shape} @ {other.shape}")
        a, b = self.data, other.data
        return _op(a @ b, (self, other), lambda g: (g @ b.T, a.T @ g))

    # -- activations and pointwise functions --------------------------------

    def tanh(self):
        y = np.tanh(self.data)
        return _op(y, (self,), lambda g: (g * (1.0 - y * y),))

    def sigmoid(self):
        x = self.data
        y = np.empty_like(x)
        pos = x >= 0
        y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        y[~pos] = ex / (1.0 + ex)
        return _op(y, (self,), lambda g: (g * y * (1.0 - y),))

    def relu(self):
        x = self.data
        return _op(np.maximum(x, 0.0), (self,), lambda g: (g * (x > 0.0),))

    def exp(self):
        y = np.exp(self.data)
        return _op(y, (self,), lambda g: (g * y,))

    def log(self):
        if (self.data <= 0.0).any():
            raise NonFiniteError("log of a non-positive value")
        x = self.data
        return _op(np.log(x), (self,), lambda g: (g / x,))

    def clip(self, lo: float, hi: float):
        """Clamp to [lo, hi]; gradient passes through only inside the interval."""
        x = self.data
        inside = (x >= lo) & (x <= hi)
        return _op(np.clip(x, lo, hi), (self,), lambda g: (g * inside,))

    # -- reductions ---------------------------------------------------------

    def sum(self, axis: int | None = None, keepdims: bool = False):
        shape = self.shape
        if axis is None:
            out = np.asarray(self.data.sum())
            return _op(out, (self,), lambda g: (np.broadcast_to(g, shape).copy(),))
        ax = axis if axis >= 0 else axis + self.ndim
        if not 0 <= ax < self.ndim:
            raise ShapeError(f"axis {axis} out of range for shape {shape}")
        out = self.data.sum(axis=ax, keepdims=keepdims)

        def bw(g):
            if not keepdims:
                g = np.expand_dims(g, ax)
            return (np.broadcast_to(g, shape).copy(),)

        return _op(out, (self,), bw)

    def mean(self, axis: int | None = None, keepdims: bool = False):
        count = self.data.size if axis is None else self.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    # -- structure ----------------------------------------------------------

    def t(self):
        """Transpose of a rank-2 tensor."""
        if self.ndim != 2:
            raise ShapeError(f"t() expects rank 2, got rank {self.ndim}")
        return _op(self.data.T.copy(), (self,), lambda g: (g.T,))


def _op(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=needs,
                  _parents=parents if needs else (),
                  _backward=backward if needs else None)


def as_tensor(x) -> Tensor:
    """Wrap arrays / scalars as constant tensors; pass tensors through."""
    return x if isinstance(x, Tensor) else Tensor(x)


def concat(xs, axis: int = -1) -> Tensor:
    """Concatenate tensors along ``axis``; all other extents must agree."""
    xs = [as_tensor(x) for x in xs]
    if not xs:
        raise ShapeError("concat of an empty list")
    ndim = xs[0].ndim
    ax = axis if axis >= 0 else axis + ndim
    if not 0 <= ax < ndim:
        raise ShapeError(f"axis {axis} out of range for rank {ndim}")
    for x in xs[1:]:
        if x.ndim != ndim:
            raise ShapeError("concat operands differ in rank")
        for d in range(ndim):
            if d != ax and x.shape[d] != xs[0].shape[d]:
                raise ShapeError(
                    f"concat off-axis extents disagree: {x.shape} vs {xs[0].shape}")
    sizes = [x.shape[ax] for x in xs]
    offsets = np.cumsum(sizes)[:-1]
    out = np.concatenate([x.data for x in xs], axis=ax)

    def bw(g):
        return tuple(np.ascontiguousarray(piece) for piece in np.split(g, offsets, axis=ax))

    return _op(out, tuple(xs), bw)


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice of ``length`` extents along ``axis`` starting at ``start``."""
    x = as_tensor(x)
    ax = axis if axis >= 0 else axis + x.ndim
    if not 0 <= ax < x.ndim:
        raise ShapeError(f"axis {axis} out of range for rank {x.ndim}")
    if start < 0 or length < 1 or start + length > x.shape[ax]:
        raise ShapeError(
            f"narrow [{start}:{start + length}] outside extent {x.shape[ax]} on axis {ax}")
    index = tuple(slice(start, start + length) if d == ax else slice(None)
                  for d in range(x.ndim))
    shape = x.shape

    def bw(g):
        buf = np.zeros(shape)
        buf[index] = g
        return (buf,)

    return _op(x.data[index].copy(), (x,), bw)


def gather_rows(x: Tensor, idx) -> Tensor:
    """Select rows (axis 0) by integer index; backward scatter-adds."""
    x = as_tensor(x)
    idx = np.asarray(idx, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError("gather_rows expects a 1-D index array")
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise ShapeError(f"gather_rows index outside [0, {x.shape[0]})")
    shape = x.shape

    def bw(g):
        buf = np.zeros(shape)
        np.add.at(buf, idx, g)
        return (buf,)

    return _op(x.data[idx].copy(), (x,), bw)


def softmax(x, axis: int = -1) -> Tensor:
    """Softmax along ``axis``, computed with max subtraction for stability."""
    x = as_tensor(x)
    ax = axis if axis >= 0 else axis + x.ndim
    if not 0 <= ax < x.ndim:
        raise ShapeError(f"axis {axis} out of range for rank {x.ndim}")
    shifted = x.data - x.data.max(axis=ax, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=ax, keepdims=True)

    def bw(g):
        dot = (g * y).sum(axis=ax, keepdims=True)
        return ((g - dot) * y,)

    return _op(y, (x,), bw)


def layernorm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale and shift.

    Population variance; ``eps`` regularizes the inverse deviation so constant
    rows map to zero (before bias) rather than dividing by zero.
    """
    if eps <= 0.0:
        raise ValueError("layernorm eps must be positive")
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(
            f"gain/bias must have shape ({d},), got {gain.shape} and {bias.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = xhat * gain.data + bias.data
    gdata = gain.data

    def bw(g):
        dgain = (g * xhat).reshape(-1, d).sum(axis=0)
        dbias = g.reshape(-1, d).sum(axis=0)
        dxhat = g * gdata
        dx = inv * (dxhat
                    - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return (dx, dgain, dbias)

    return _op(out, (x, gain, bias), bw)
