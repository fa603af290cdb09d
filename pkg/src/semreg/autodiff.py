"""Minimal dense-tensor engine with reverse-mode automatic differentiation.

Everything is double precision and numpy-backed.  Each operation records a
vector-Jacobian closure on the participating tensors; ``backward`` replays
the tape in reverse topological order.  The primitive set is exactly what
the feature networks, optimal-transport matcher, and training loss need:
matmul, transpose, reshape, broadcast arithmetic, relu, softmax, log, exp,
power, sum/mean/max reductions, concat, row gather, 2-D crop, and a
feature-standardization op with learned scale and shift.

Gradients accumulate: calling ``backward`` twice adds into ``grad``, which
is what per-pair accumulation over a training batch relies on.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.typing import NDArray

from .errors import ValidationError

Array = NDArray[np.float64]

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable taping inside the context (inference-only forward passes)."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


class Tensor:
    """A dense float64 array plus optional gradient provenance."""

    __slots__ = ("data", "_grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, data: object, requires_grad: bool = False):
        self.data: Array = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self._grad: Array | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable[[Array], tuple[Array | None, ...]] | None = None

    # -- plumbing -----------------------------------------------------------

    @property
    def grad(self) -> Array | None:
        """Accumulated gradient; allocated on first access to keep the
        forward pass free of per-node zero buffers."""
        if self._grad is None and self.requires_grad:
            self._grad = np.zeros_like(self.data)
        return self._grad

    @grad.setter
    def grad(self, value: Array | None) -> None:
        self._grad = value

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ValidationError(f"item() needs a scalar, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        if self._grad is not None:
            self._grad.fill(0.0)

    def __repr__(self) -> str:
        grad = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{grad})"

    # -- operator sugar -----------------------------------------------------

    def __add__(self, other: object) -> "Tensor":
        return add(self, _as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other: object) -> "Tensor":
        return subtract(self, _as_tensor(other))

    def __rsub__(self, other: object) -> "Tensor":
        return subtract(_as_tensor(other), self)

    def __mul__(self, other: object) -> "Tensor":
        return multiply(self, _as_tensor(other))

    __rmul__ = __mul__

    def __truediv__(self, other: object) -> "Tensor":
        return divide(self, _as_tensor(other))

    def __rtruediv__(self, other: object) -> "Tensor":
        return divide(_as_tensor(other), self)

    def __neg__(self) -> "Tensor":
        return multiply(self, _as_tensor(-1.0))

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    # -- method-style reductions and reshapes -------------------------------

    def reshape(self, *shape: int) -> "Tensor":
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def transpose(self, axes: Sequence[int] | None = None) -> "Tensor":
        return transpose(self, axes)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def sum(self, axis: int | None = None, keepdims: bool = False) -> "Tensor":
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis: int | None = None, keepdims: bool = False) -> "Tensor":
        return tensor_mean(self, axis=axis, keepdims=keepdims)

    def max(self, axis: int | None = None, keepdims: bool = False) -> "Tensor":
        return tensor_max(self, axis=axis, keepdims=keepdims)


class Parameter(Tensor):
    """A named, trainable tensor with a momentum buffer."""

    __slots__ = ("name", "momentum_buffer")

    def __init__(self, name: str, data: object):
        super().__init__(data, requires_grad=True)
        self.name = name
        self.momentum_buffer: Array = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def _as_tensor(value: object) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _make(
    data: Array, parents: tuple[Tensor, ...], vjp: Callable[[Array], tuple[Array | None, ...]]
) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._vjp = vjp
    return out


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    """Reduce a broadcast gradient back to the original operand shape."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    squeeze = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if squeeze:
        grad = grad.sum(axis=squeeze, keepdims=True)
    return grad


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValidationError(
            f"{op}: shapes {a.shape} and {b.shape} do not broadcast"
        ) from None


# ---------------------------------------------------------------------------
# Primitives
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("add", a, b)
    return _make(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def subtract(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("subtract", a, b)
    return _make(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def multiply(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("multiply", a, b)
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (
            _unbroadcast(g * b.data, a.shape),
            _unbroadcast(g * a.data, b.shape),
        ),
    )


def divide(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("divide", a, b)
    return _make(
        a.data / b.data,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        ),
    )


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValidationError(f"matmul: shapes {a.shape} and {b.shape} are incompatible")
    return _make(
        a.data @ b.data,
        (a, b),
        lambda g: (g @ b.data.T, a.data.T @ g),
    )


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        inverse: Sequence[int] | None = None
    else:
        inverse = np.argsort(axes)
    return _make(
        np.transpose(a.data, axes),
        (a,),
        lambda g: (np.transpose(g, inverse),),
    )


def reshape(a: Tensor, shape: int | Sequence[int]) -> Tensor:
    return _make(
        a.data.reshape(shape),
        (a,),
        lambda g: (g.reshape(a.shape),),
    )


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0.0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def power(a: Tensor, exponent: float) -> Tensor:
    out = a.data**exponent
    return _make(out, (a,), lambda g: (g * exponent * a.data ** (exponent - 1.0),))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g: Array) -> tuple[Array]:
        inner = (g * out).sum(axis=axis, keepdims=True)
        return ((g - inner) * out,)

    return _make(out, (a,), vjp)


def tensor_sum(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    def vjp(g: Array) -> tuple[Array]:
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), vjp)


def tensor_mean(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    count = a.data.size if axis is None else a.shape[axis]

    def vjp(g: Array) -> tuple[Array]:
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape) / count,)

    return _make(a.data.mean(axis=axis, keepdims=keepdims), (a,), vjp)


def tensor_max(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    """Max reduction; the gradient is routed only to the (first) argmax."""
    if axis is None:
        flat_idx = int(np.argmax(a.data))

        def vjp_all(g: Array) -> tuple[Array]:
            ga = np.zeros_like(a.data)
            ga.reshape(-1)[flat_idx] = g.reshape(())
            return (ga,)

        return _make(a.data.max(), (a,), vjp_all)

    idx = np.expand_dims(np.argmax(a.data, axis=axis), axis)

    def vjp(g: Array) -> tuple[Array]:
        if not keepdims:
            g = np.expand_dims(g, axis)
        ga = np.zeros_like(a.data)
        np.put_along_axis(ga, idx, g, axis=axis)
        return (ga,)

    return _make(a.data.max(axis=axis, keepdims=keepdims), (a,), vjp)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]

    def vjp(g: Array) -> tuple[Array, ...]:
        return tuple(np.split(g, offsets, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, vjp)


def gather(a: Tensor, indices: object) -> Tensor:
    """Select rows (axis 0) by an integer index list; repeats allowed."""
    idx = np.asarray(indices, dtype=np.int64)

    def vjp(g: Array) -> tuple[Array]:
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx, g)
        return (ga,)

    return _make(a.data[idx], (a,), vjp)


def crop2d(a: Tensor, rows: int, cols: int) -> Tensor:
    """Keep the leading ``rows`` x ``cols`` block of a 2-D tensor."""
    if a.data.ndim != 2:
        raise ValidationError(f"crop2d: expected a 2-D tensor, got shape {a.shape}")

    def vjp(g: Array) -> tuple[Array]:
        ga = np.zeros_like(a.data)
        ga[:rows, :cols] = g
        return (ga,)

    return _make(a.data[:rows, :cols].copy(), (a,), vjp)


def feature_normalize(
    a: Tensor, scale: Tensor, shift: Tensor, axis: int = 0, eps: float = 1e-5
) -> Tensor:
    """Standardize each feature over ``axis`` then apply learned scale and shift.

    Statistics are computed per call (no running averages), so the op is a
    pure function of its inputs.  Fused into one node with the closed-form
    normalization gradient; the mean and variance terms would otherwise
    dominate the tape for large point batches.
    """
    scale = _as_tensor(scale)
    shift = _as_tensor(shift)
    mu = a.data.mean(axis=axis, keepdims=True)
    centered = a.data - mu
    var = np.mean(centered * centered, axis=axis, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    out = xhat * scale.data + shift.data

    def vjp(g: Array) -> tuple[Array, Array, Array]:
        g_xhat = g * scale.data
        # d/da of (a - mu) / sqrt(var + eps) with mu, var functions of a
        g_a = inv_std * (
            g_xhat
            - g_xhat.mean(axis=axis, keepdims=True)
            - xhat * np.mean(g_xhat * xhat, axis=axis, keepdims=True)
        )
        return (
            g_a,
            _unbroadcast(g * xhat, scale.shape),
            _unbroadcast(g, shift.shape),
        )

    return _make(out, (a, scale, shift), vjp)


# ---------------------------------------------------------------------------
# Reverse pass
# ---------------------------------------------------------------------------


def backward(loss: Tensor) -> None:
    """Accumulate dLoss/dx into ``grad`` of every reachable requires_grad tensor."""
    if loss.data.size != 1:
        raise ValidationError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return

    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))

    if loss._grad is None:
        loss._grad = np.ones_like(loss.data)
    else:
        loss._grad += np.ones_like(loss.data)
    for node in reversed(order):
        if node._vjp is None:
            continue
        grads = node._vjp(node.grad)
        for parent, g in zip(node._parents, grads):
            if g is None or not parent.requires_grad:
                continue
            if parent._grad is None:
                # copy: a vjp may hand the same buffer to several parents
                parent._grad = np.array(g, dtype=np.float64, copy=True)
            else:
                parent._grad += g


# ---------------------------------------------------------------------------
# Verification and optimization
# ---------------------------------------------------------------------------


def grad_check(
    f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5
) -> float:
    """Max relative error between analytic and central-difference gradients.

    The relative error per coordinate is |analytic - numeric| divided by
    max(1, |analytic|, |numeric|).
    """
    if not 0.0 < eps <= 1e-3:
        raise ValidationError(f"eps must be in (0, 1e-3], got {eps}")
    if not isinstance(x, Tensor) or not x.requires_grad:
        raise ValidationError("grad_check needs a requires_grad Tensor")

    x.zero_grad()
    backward(f(x))
    analytic = x.grad.copy()

    numeric = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    num_flat = numeric.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + eps
            upper = f(x).item()
            flat[i] = original - eps
            lower = f(x).item()
            flat[i] = original
            num_flat[i] = (upper - lower) / (2.0 * eps)

    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float((np.abs(analytic - numeric) / denom).max())


def momentum_step(
    params: Iterable[Parameter], lr: float, momentum_coeff: float = 0.9
) -> None:
    """SGD with momentum: buffer <- mu*buffer + grad; value <- value - lr*buffer.

    Gradients are zeroed afterwards.  Learning-rate decay across epochs is
    the training loop's job.
    """
    for p in params:
        p.momentum_buffer *= momentum_coeff
        p.momentum_buffer += p.grad
        p.data -= lr * p.momentum_buffer
        p.zero_grad()


def zero_grads(params: Iterable[Parameter]) -> None:
    for p in params:
        p.zero_grad()


def clip_gradients(
    params: Iterable[Parameter], max_norm: float, per_parameter: bool = False
) -> float:
    """Scale gradients so their L2 norm is at most ``max_norm``.

    Returns the pre-clip joint norm.  Loss gradients through the summed
    neighbor aggregation are orders of magnitude larger than the parameters
    early in training; without a cap the first momentum steps destroy the
    model.  With ``per_parameter`` each tensor is capped separately, which
    also stops the graph-convolution layers from hogging the whole update
    budget while the affinity weights crawl.
    """
    if max_norm <= 0.0:
        raise ValidationError(f"max_norm must be > 0, got {max_norm}")
    params = list(params)
    norms = [float(np.sqrt((p.grad**2).sum())) for p in params]
    total = float(np.sqrt(sum(n**2 for n in norms)))
    if per_parameter:
        for p, n in zip(params, norms):
            if n > max_norm:
                p.grad *= max_norm / n
    elif total > max_norm:
        factor = max_norm / total
        for p in params:
            p.grad *= factor
    return total


def uniform_init(
    rng: np.random.Generator, shape: tuple[int, ...], fan_in: int | None = None
) -> Array:
    """Uniform init in [-sqrt(1/fan_in), +sqrt(1/fan_in)] (fan_in = first dim)."""
    if fan_in is None:
        fan_in = shape[0]
    bound = float(np.sqrt(1.0 / fan_in))
    return rng.uniform(-bound, bound, size=shape)
