"""Define-by-run reverse-mode differentiation over numpy arrays.

Every forward operator builds a fresh node in the trace; ``backward`` walks the
trace once in reverse topological order and accumulates gradients into the
``grad`` slot of each leaf that requires them. ``detach`` returns a value-equal
tensor with no trace parent, so nothing upstream of it ever receives gradient.

Operator reference (shape rules)
--------------------------------
=================  ==========================================================
add, sub, mul, div numpy broadcasting between the two operands
neg, scale, exp,   elementwise, output shape == input shape
log, tanh, sigmoid
gelu               tanh approximation:
                   0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))
abs, relu, clamp   elementwise (subgradient 0 at kinks / outside the range)
maximum, minimum   broadcasting; ties send the gradient to the first operand
power              elementwise x ** p for a Python scalar p
squared_error      broadcasting, (a - b) ** 2
matmul             (..., n, k) @ (..., k, m) -> (..., n, m); leading dims
                   broadcast, a 2-D right operand is shared across the batch
transpose          permutation of the axes
reshape            product of the new shape == product of the old shape
concat             equal shapes except along ``axis``
getitem / take     numpy basic or integer-array indexing
embedding          (V, D) table, integer ids of any shape -> ids.shape + (D,)
softmax,           along ``axis``
log_softmax
layer_norm         normalizes the last axis; gamma, beta have shape (D,)
sum, mean          over ``axis`` (None reduces everything), optional keepdims
=================  ==========================================================
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "NonFiniteError",
    "tensor",
    "detach",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "scale",
    "exp",
    "log",
    "tanh",
    "sigmoid",
    "gelu",
    "relu",
    "abs_",
    "clamp",
    "maximum",
    "minimum",
    "power",
    "squared_error",
    "matmul",
    "transpose",
    "reshape",
    "concat",
    "take",
    "embedding",
    "softmax",
    "log_softmax",
    "layer_norm",
    "sum_",
    "mean",
    "cross_entropy",
    "finite_difference_check",
]


class ShapeError(ValueError):
    """Operand shapes do not satisfy an operator's shape rule."""


class NonFiniteError(FloatingPointError):
    """A NaN or infinity entered the trace."""


def _check_finite(arr: np.ndarray, where: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{where}: non-finite value encountered")


class Tensor:
    """An n-d float array that can take part in a differentiation trace."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        _check_finite(arr, "tensor")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], tuple] | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item: tensor has {self.data.size} elements")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return detach(self)

    def backward(self) -> None:
        backward(self)

    # operator sugar
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

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _node(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    live = any(p.requires_grad for p in parents)
    out.requires_grad = live
    if live:
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    ndim_extra = grad.ndim - len(shape)
    if ndim_extra > 0:
        grad = grad.sum(axis=tuple(range(ndim_extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# detach and backward


def detach(x: Tensor) -> Tensor:
    """Value-equal copy of ``x`` with no trace parent and ``requires_grad`` False."""
    out = Tensor.__new__(Tensor)
    out.data = x.data
    out.requires_grad = False
    out.grad = None
    out._parents = ()
    out._backward = None
    out.op = "detach"
    return out


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in reversed(node._parents):
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every live leaf.

    Gradients add onto whatever is already in the slot, so call ``zero_grad``
    on the parameters between independent backward passes.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must have a single element, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return _node(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _broadcast_shape("sub", a, b)
    sa, sb = a.shape, b.shape
    return _node(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _broadcast_shape("mul", a, b)
    ad, bd = a.data, b.data

    def bw(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _node(ad * bd, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _broadcast_shape("div", a, b)
    ad, bd = a.data, b.data
    if np.any(bd == 0):
        raise NonFiniteError("div: division by zero")
    out = ad / bd

    def bw(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)

    return _node(out, (a, b), bw, "div")


def neg(x: Tensor) -> Tensor:
    return _node(-x.data, (x,), lambda g: (-g,), "neg")


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _node(x.data * c, (x,), lambda g: (g * c,), "scale")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _node(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise NonFiniteError("log: non-positive input")
    xd = x.data
    return _node(np.log(xd), (x,), lambda g: (g / xd,), "log")


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _node(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    out = np.empty_like(xd)
    pos = xd >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    ez = np.exp(xd[~pos])
    out[~pos] = ez / (1.0 + ez)
    return _node(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    xd = x.data
    inner = _GELU_C * (xd + 0.044715 * xd * xd * xd)
    t = np.tanh(inner)
    out = 0.5 * xd * (1.0 + t)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * xd * xd)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner),)

    return _node(out, (x,), bw, "gelu")


def relu(x: Tensor) -> Tensor:
    on = x.data > 0
    return _node(np.where(on, x.data, 0.0).astype(x.dtype, copy=False), (x,), lambda g: (g * on,), "relu")


def abs_(x: Tensor) -> Tensor:
    sign = np.sign(x.data)
    return _node(np.abs(x.data), (x,), lambda g: (g * sign,), "abs")


def clamp(x: Tensor, lo: float | None = None, hi: float | None = None) -> Tensor:
    xd = x.data
    out = np.clip(xd, lo, hi)
    inside = np.ones(xd.shape, dtype=bool)
    if lo is not None:
        inside &= xd >= lo
    if hi is not None:
        inside &= xd <= hi
    return _node(out, (x,), lambda g: (g * inside,), "clamp")


def maximum(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _broadcast_shape("maximum", a, b)
    first = a.data >= b.data

    def bw(g):
        return _unbroadcast(g * first, a.shape), _unbroadcast(g * ~first, b.shape)

    return _node(np.maximum(a.data, b.data), (a, b), bw, "maximum")


def minimum(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _broadcast_shape("minimum", a, b)
    first = a.data <= b.data

    def bw(g):
        return _unbroadcast(g * first, a.shape), _unbroadcast(g * ~first, b.shape)

    return _node(np.minimum(a.data, b.data), (a, b), bw, "minimum")


def power(x: Tensor, p: float) -> Tensor:
    xd = x.data
    if p < 1 and np.any(xd <= 0):
        raise NonFiniteError(f"power: exponent {p} needs positive input")
    return _node(xd**p, (x,), lambda g: (g * p * xd ** (p - 1),), "power")


def squared_error(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _broadcast_shape("squared_error", a, b)
    diff = a.data - b.data

    def bw(g):
        return _unbroadcast(2.0 * g * diff, a.shape), _unbroadcast(-2.0 * g * diff, b.shape)

    return _node(diff * diff, (a, b), bw, "squared_error")


# ---------------------------------------------------------------------------
# linear algebra and shape manipulation


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    try:
        out = ad @ bd
    except ValueError:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from None

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if bd.ndim == 2 and ad.ndim > 2:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        if ga is not None:
            ga = _unbroadcast(ga, ad.shape)
        return ga, gb

    return _node(out, (a, b), bw, "matmul")


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.data.ndim)))
    axes = tuple(axes)
    if sorted(axes) != list(range(x.data.ndim)):
        raise ShapeError(f"transpose: axes {axes} do not permute shape {x.shape}")
    inverse = tuple(np.argsort(axes))
    return _node(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),), "transpose")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {old} to {tuple(shape)}") from None
    return _node(out, (x,), lambda g: (g.reshape(old),), "reshape")


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = list(xs)
    if not xs:
        raise ShapeError("concat: no operands")
    try:
        out = np.concatenate([x.data for x in xs], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: shapes {[x.shape for x in xs]} differ off axis {axis}") from None
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _node(out, xs, bw, "concat")


def take(x: Tensor, index) -> Tensor:
    """Index ``x`` with numpy semantics; repeated integer indices accumulate."""
    try:
        out = x.data[index]
    except IndexError as err:
        raise ShapeError(f"take: {err} for shape {x.shape}") from None
    out = np.array(out, dtype=x.dtype, copy=True)
    shape, dtype = x.shape, x.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, index, g)
        return (full,)

    return _node(out, (x,), bw, "take")


def embedding(weight: Tensor, ids) -> Tensor:
    ids = np.asarray(ids)
    if ids.dtype.kind not in "iu":
        raise ShapeError(f"embedding: ids must be integers, got {ids.dtype}")
    vocab = weight.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise ShapeError(f"embedding: id out of range for table of {vocab} rows")
    shape, dtype = weight.shape, weight.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, shape[1]))
        return (full,)

    return _node(weight.data[ids], (weight,), bw, "embedding")


# ---------------------------------------------------------------------------
# normalizations and reductions


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _node(out, (x,), bw, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)

    def bw(g):
        return (g - probs * g.sum(axis=axis, keepdims=True),)

    return _node(out, (x,), bw, "log_softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: gamma {gamma.shape} / beta {beta.shape} do not match last axis of {x.shape}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data

    def bw(g):
        gx = None
        if x.requires_grad:
            gh = g * gd
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        ggamma = (g * xhat).sum(axis=lead) if gamma.requires_grad else None
        gbeta = g.sum(axis=lead) if beta.requires_grad else None
        return gx, ggamma, gbeta

    return _node(xhat * gd + beta.data, (x, gamma, beta), bw, "layer_norm")


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, x.data.ndim)
    shape = x.shape
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return _node(np.asarray(out), (x,), bw, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, x.data.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    if count == 0:
        raise ShapeError(f"mean: empty reduction over shape {x.shape}")
    return scale(sum_(x, axis=axis, keepdims=keepdims), 1.0 / count)


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` under row-wise softmax."""
    targets = np.asarray(targets, dtype=np.int64)
    if logits.data.ndim != 2 or targets.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs targets {targets.shape}")
    logp = log_softmax(logits, axis=-1)
    picked = take(logp, (np.arange(len(targets)), targets))
    return neg(mean(picked))


# ---------------------------------------------------------------------------
# gradient checking


def finite_difference_check(
    f: Callable[[Tensor], Tensor],
    x,
    step: float = 1e-5,
    indices: Iterable[tuple[int, ...]] | None = None,
) -> float:
    """Max over elements of |analytic - central difference| / max(1, |analytic|).

    ``indices`` restricts the comparison to a subset of coordinates; by default
    every element of ``x`` is checked.
    """
    if step <= 0:
        raise ValueError("finite_difference_check: step must be positive")
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64, copy=True)
    probe = Tensor(base.copy(), requires_grad=True)
    out = f(probe)
    if out.data.size != 1:
        raise ShapeError(f"finite_difference_check: f must be scalar-valued, got shape {out.shape}")
    backward(out)
    analytic = probe.grad if probe.grad is not None else np.zeros_like(base)

    if indices is None:
        indices = list(np.ndindex(base.shape))
    worst = 0.0
    for idx in indices:
        bumped = base.copy()
        bumped[idx] += step
        hi = f(Tensor(bumped)).item()
        bumped[idx] -= 2 * step
        lo = f(Tensor(bumped)).item()
        numeric = (hi - lo) / (2 * step)
        if not math.isfinite(numeric):
            raise NonFiniteError(f"finite_difference_check: non-finite difference at {idx}")
        a = float(analytic[idx])
        worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
    return worst
