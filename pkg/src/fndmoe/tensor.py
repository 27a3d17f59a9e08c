"""Float64 arrays with a dynamic reverse-mode differentiation tape.

Every op returns a new :class:`Tensor` that remembers its parents and a
closure mapping the output gradient to one gradient per parent. Calling
``backward()`` on a scalar builds a :class:`Tape` (the parents-first
ordering of the graph) and replays it in reverse, summing contributions
into ``.grad``. Graphs are rebuilt on every forward pass, so data-dependent
structure (per-sample gate masks) needs no special handling.

Nothing here touches global state, so independent graphs may be built and
differentiated on separate threads.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import InvalidArgumentError, ShapeError

DTYPE = np.float64
LAYER_NORM_EPS = 1e-5


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None, op: str = "leaf"):
        self.data = np.asarray(data, dtype=DTYPE)
        if self.data.ndim == 0:
            self.data = self.data.reshape(())
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = tuple(_parents)
        self._backward = _backward
        self.op = op

    # -- introspection ---------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise InvalidArgumentError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    def backward(self, grad=None) -> "Tape":
        tape = Tape(self)
        tape.backward(grad)
        return tape

    # -- operators -------------------------------------------------------
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

    def __pow__(self, p: float):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


class Tape:
    """Parents-first ordering of every node reachable from ``output``.

    Built iteratively, so deep graphs do not hit the recursion limit.
    """

    def __init__(self, output: Tensor):
        self.output = output
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(output, False)]
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
                if id(parent) not in seen:
                    stack.append((parent, False))
        self.nodes = order

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, grad=None) -> None:
        out = self.output
        if grad is None:
            if out.size != 1:
                raise InvalidArgumentError(
                    f"backward() without an explicit gradient needs a scalar, got shape {out.shape}"
                )
            grad = np.ones_like(out.data)
        grad = np.asarray(grad, dtype=DTYPE)
        if grad.shape != out.shape:
            raise ShapeError("backward", grad.shape, out.shape)
        pending: dict[int, np.ndarray] = {id(out): grad}
        for node in reversed(self.nodes):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                node.grad = g if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                pending[key] = pg if key not in pending else pending[key] + pg


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data, op=op)
    return Tensor(data, requires_grad=True, _parents=parents, _backward=backward, op=op)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# -- elementwise binary ----------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    out = a.data / b.data

    def backward(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)

    return _result(out, (a, b), backward, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    p = float(p)

    def backward(g):
        return (g * p * a.data ** (p - 1.0),)

    return _result(a.data**p, (a,), backward, "pow")


def matmul(a, b) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape) from None

    def backward(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape) if b.requires_grad else None
        return ga, gb

    return _result(out, (a, b), backward, "matmul")


# -- elementwise unary -----------------------------------------------------

def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0.0):
        raise InvalidArgumentError("log: input must be strictly positive")
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    """Logistic function, evaluated without overflow for large |x|."""
    a = as_tensor(a)
    out = _sigmoid(a.data)
    return _result(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def relu(a) -> Tensor:
    a = as_tensor(a)
    on = a.data > 0
    return _result(np.where(on, a.data, 0.0), (a,), lambda g: (g * on,), "relu")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _result(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def clamp_min(a, lo: float) -> Tensor:
    """max(a, lo); gradient passes only where the input was above ``lo``."""
    a = as_tensor(a)
    keep = a.data > lo
    return _result(np.where(keep, a.data, lo), (a,), lambda g: (g * keep,), "clamp_min")


def stop_gradient(a) -> Tensor:
    return as_tensor(a).detach()


# -- reductions and shape ops ---------------------------------------------

def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(out, (a,), backward, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    count = 1
    for ax in axes:
        count *= a.shape[ax]
    if count == 0:
        raise InvalidArgumentError(f"mean over an empty axis of shape {a.shape}")
    out = a.data.mean(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return _result(out, (a,), backward, "mean")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, tuple(shape)) from None
    return _result(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    return _result(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),), "transpose")


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    a = as_tensor(a)
    axes = list(range(a.ndim))
    axes[ax1], axes[ax2] = axes[ax2], axes[ax1]
    return transpose(a, tuple(axes))


def getitem(a, key) -> Tensor:
    """Basic or advanced indexing; repeated indices accumulate in backward."""
    a = as_tensor(a)
    out = a.data[key]

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, key, g)
        return (full,)

    return _result(out, (a,), backward, "getitem")


def take(a, indices, axis: int = 0) -> Tensor:
    a = as_tensor(a)
    indices = np.asarray(indices, dtype=np.intp)
    axis = axis % a.ndim
    out = np.take(a.data, indices, axis=axis)

    def backward(g):
        full = np.zeros_like(a.data)
        moved = np.moveaxis(full, axis, 0)
        np.add.at(moved, indices, np.moveaxis(g, axis, 0))
        return (full,)

    return _result(out, (a,), backward, "take")


def gather_rows(a, indices) -> Tensor:
    """Per-batch row gather: ``a`` is (B, M, ...), ``indices`` (B, k) -> (B, k, ...)."""
    a = as_tensor(a)
    indices = np.asarray(indices, dtype=np.intp)
    if indices.ndim != 2 or a.ndim < 2 or indices.shape[0] != a.shape[0]:
        raise ShapeError("gather_rows", a.shape, indices.shape)
    batch = np.arange(a.shape[0])[:, None]
    return getitem(a, (batch, indices))


def concat(tensors: Iterable, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise InvalidArgumentError("concat of an empty list")
    ndim = tensors[0].ndim
    axis = axis % ndim
    for t in tensors[1:]:
        if t.ndim != ndim or any(t.shape[i] != tensors[0].shape[i] for i in range(ndim) if i != axis):
            raise ShapeError("concat", tensors[0].shape, t.shape)
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(out, tensors, backward, "concat")


def stack(tensors: Iterable, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise InvalidArgumentError("stack of an empty list")
    for t in tensors[1:]:
        if t.shape != tensors[0].shape:
            raise ShapeError("stack", tensors[0].shape, t.shape)
    axis = axis % (tensors[0].ndim + 1)
    out = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _result(out, tensors, backward, "stack")


# -- normalisers and attention --------------------------------------------

def softmax(a, axis: int = -1, mask=None) -> Tensor:
    """Max-shifted softmax. ``mask`` (broadcastable bools) marks allowed entries."""
    a = as_tensor(a)
    if a.size == 0 or a.shape[axis] == 0:
        raise InvalidArgumentError("softmax of an empty input")
    x = a.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        if not np.all(mask.any(axis=axis)):
            raise InvalidArgumentError("softmax: every entry along the axis is masked")
        x = np.where(mask, x, -np.inf)
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, (a,), backward, "softmax")


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    x = a.data
    m = x.max(axis=axis, keepdims=True)
    lse = m + np.log(np.exp(x - m).sum(axis=axis, keepdims=True))
    out = x - lse
    probs = np.exp(out)

    def backward(g):
        return (g - probs * g.sum(axis=axis, keepdims=True),)

    return _result(out, (a,), backward, "log_softmax")


def layer_norm(x, gamma, beta, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalise over the last axis, then apply the affine ``gamma``/``beta``."""
    x = as_tensor(x)
    centered = x - mean(x, axis=-1, keepdims=True)
    var = mean(centered * centered, axis=-1, keepdims=True)
    normed = centered * power(var + eps, -0.5)
    return normed * gamma + beta


def scaled_dot_product_attention(q, k, v, key_mask=None) -> Tensor:
    """softmax(q kᵀ / sqrt(d)) v over the last two axes.

    ``key_mask`` broadcasts against the (..., Lq, Lk) score array; False
    entries are excluded from the softmax.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise ShapeError("attention", q.shape, k.shape, v.shape)
    scores = matmul(q, swapaxes(k, -1, -2)) * (1.0 / np.sqrt(q.shape[-1]))
    weights = softmax(scores, axis=-1, mask=key_mask)
    return matmul(weights, v)


# -- finite-difference checking -------------------------------------------

def check_gradients(f: Callable[..., Tensor], x, eps: float = 1e-5) -> float:
    """Compare reverse-mode gradients of ``f`` against central differences.

    ``x`` is one array/Tensor or a sequence of them; ``f`` receives one
    Tensor per input and must return a single-element Tensor. Returns the
    maximum over coordinates of
    ``|analytic - numeric| / max(1, |analytic|, |numeric|)``.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise InvalidArgumentError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    many = isinstance(x, (list, tuple))
    bases = [np.array(t.data if isinstance(t, Tensor) else t, dtype=DTYPE) for t in (x if many else [x])]

    leaves = [Tensor(b.copy(), requires_grad=True) for b in bases]
    out = as_tensor(f(*leaves))
    if out.size != 1:
        raise InvalidArgumentError(f"check_gradients needs a scalar-valued f, got shape {out.shape}")
    out.backward()

    def value_at(i: int, idx, delta: float) -> float:
        args = [Tensor(b) for b in bases]
        bumped = bases[i].copy()
        bumped[idx] += delta
        args[i] = Tensor(bumped)
        return as_tensor(f(*args)).item()

    worst = 0.0
    for i, base in enumerate(bases):
        analytic = leaves[i].grad if leaves[i].grad is not None else np.zeros_like(base)
        for idx in np.ndindex(base.shape):
            numeric = (value_at(i, idx, eps) - value_at(i, idx, -eps)) / (2.0 * eps)
            a = float(analytic[idx])
            err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            worst = max(worst, err)
    return worst
