"""Dense float64 tensors with reverse-mode automatic differentiation.

A small define-by-run engine: every operation computes its result eagerly
with numpy and records a closure mapping the output gradient back to input
gradients. ``backward`` walks the recorded graph in reverse topological
order. Graphs are rebuilt on every forward pass, so there is no persistent
state to invalidate between training steps.

Conventions:
  * all tensor data is float64; lists/ints are converted on entry
  * tensors are value-semantic: operations never mutate their inputs, and a
    tensor can safely be handed to another thread
  * anything stochastic (parameter init) takes an explicit numpy Generator
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor",
    "ParamSet",
    "SGD",
    "Adam",
    "make_optimizer",
    "ShapeError",
    "GraphError",
    "NonFiniteError",
    "backward",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "relu",
    "tanh",
    "sigmoid",
    "exp",
    "log",
    "sqrt",
    "square",
    "softmax",
    "min_along",
    "tsum",
    "tmean",
    "reshape",
    "transpose",
    "concat",
    "clip_min",
    "linear",
    "l2_normalize",
    "xavier_uniform",
    "assert_finite",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class GraphError(RuntimeError):
    """Misuse of the autodiff graph (double backward, non-scalar loss, ...)."""


class NonFiniteError(ArithmeticError):
    """A value that must be finite contains NaN or Inf."""


def _as_array(data) -> np.ndarray:
    arr = np.asarray(data, dtype=np.float64)
    return arr


class Tensor:
    """A float64 array plus an optional gradient and graph record."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_done")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None):
        self.data = _as_array(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = _parents
        self._backward = _backward
        self._done = False

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
            raise ShapeError(f"item() on tensor of size {self.data.size}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self, params: "ParamSet | None" = None) -> None:
        backward(self, params)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

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


def _ensure(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    requires = any(p.requires_grad for p in parents)
    if not requires:
        return Tensor(data)
    return Tensor(data, requires_grad=True, _parents=parents, _backward=backward_fn)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` along axes that numpy broadcast up."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def assert_finite(value, what: str) -> None:
    arr = value.data if isinstance(value, Tensor) else np.asarray(value)
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values in {what}")


# ---------------------------------------------------------------------------
# elementwise arithmetic (broadcasting, numpy semantics)
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _ensure(a), _ensure(b)
    out = a.data + b.data

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out, (a, b), back)


def sub(a, b) -> Tensor:
    a, b = _ensure(a), _ensure(b)
    out = a.data - b.data

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(out, (a, b), back)


def mul(a, b) -> Tensor:
    a, b = _ensure(a), _ensure(b)
    out = a.data * b.data

    def back(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(out, (a, b), back)


def div(a, b) -> Tensor:
    a, b = _ensure(a), _ensure(b)
    out = a.data / b.data

    def back(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return _make(out, (a, b), back)


def neg(a) -> Tensor:
    a = _ensure(a)

    def back(g):
        return (-g,)

    return _make(-a.data, (a,), back)


# ---------------------------------------------------------------------------
# matrix product
# ---------------------------------------------------------------------------


def _reduce_leading(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce extra/broadcast leading (batch) axes after a matmul gradient."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i in range(grad.ndim - 2) if shape[i] == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def matmul(a, b) -> Tensor:
    a, b = _ensure(a), _ensure(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul requires operands with ndim >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def back(g):
        ga = _reduce_leading(g @ np.swapaxes(b.data, -1, -2), a.shape)
        gb = _reduce_leading(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _make(out, (a, b), back)


# ---------------------------------------------------------------------------
# elementwise nonlinearities
# ---------------------------------------------------------------------------


def relu(a) -> Tensor:
    a = _ensure(a)
    out = np.maximum(a.data, 0.0)

    def back(g):
        return (g * (a.data > 0.0),)

    return _make(out, (a,), back)


def tanh(a) -> Tensor:
    a = _ensure(a)
    out = np.tanh(a.data)

    def back(g):
        return (g * (1.0 - out * out),)

    return _make(out, (a,), back)


def sigmoid(a) -> Tensor:
    a = _ensure(a)
    out = 1.0 / (1.0 + np.exp(-a.data))

    def back(g):
        return (g * out * (1.0 - out),)

    return _make(out, (a,), back)


def exp(a) -> Tensor:
    a = _ensure(a)
    out = np.exp(a.data)

    def back(g):
        return (g * out,)

    return _make(out, (a,), back)


def log(a) -> Tensor:
    a = _ensure(a)
    out = np.log(a.data)

    def back(g):
        return (g / a.data,)

    return _make(out, (a,), back)


def sqrt(a) -> Tensor:
    a = _ensure(a)
    out = np.sqrt(a.data)

    def back(g):
        return (g / (2.0 * out),)

    return _make(out, (a,), back)


def square(a) -> Tensor:
    a = _ensure(a)

    def back(g):
        return (g * 2.0 * a.data,)

    return _make(a.data * a.data, (a,), back)


def clip_min(a, floor: float) -> Tensor:
    """max(a, floor) elementwise; gradient passes only where a > floor."""
    a = _ensure(a)
    out = np.maximum(a.data, floor)

    def back(g):
        return (g * (a.data > floor),)

    return _make(out, (a,), back)


def softmax(a, axis: int = -1) -> Tensor:
    a = _ensure(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _make(out, (a,), back)


def min_along(a, axis: int) -> Tensor:
    """Minimum along one axis; gradient routed to the first argmin."""
    a = _ensure(a)
    idx = np.expand_dims(a.data.argmin(axis=axis), axis)
    out = np.take_along_axis(a.data, idx, axis=axis).squeeze(axis)

    def back(g):
        ga = np.zeros_like(a.data)
        np.put_along_axis(ga, idx, np.expand_dims(g, axis), axis=axis)
        return (ga,)

    return _make(out, (a,), back)


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _ensure(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        g2 = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g2, a.shape).copy(),)

    return _make(out, (a,), back)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _ensure(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    if axis is None:
        count = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = 1
        for ax in axes:
            count *= a.shape[ax]

    def back(g):
        if axis is None:
            return (np.broadcast_to(g / count, a.shape).copy(),)
        g2 = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g2 / count, a.shape).copy(),)

    return _make(out, (a,), back)


def reshape(a, shape) -> Tensor:
    a = _ensure(a)

    def back(g):
        return (g.reshape(a.shape),)

    return _make(a.data.reshape(shape), (a,), back)


def transpose(a, axes) -> Tensor:
    a = _ensure(a)
    inv = np.argsort(axes)

    def back(g):
        return (np.transpose(g, inv),)

    return _make(np.transpose(a.data, axes), (a,), back)


def concat(tensors, axis: int = -1) -> Tensor:
    ts = tuple(_ensure(t) for t in tensors)
    out = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(out, ts, back)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------


def backward(loss: Tensor, params: "ParamSet | None" = None) -> None:
    """Fill ``grad`` on every tensor reachable from ``loss``.

    ``loss`` must be a scalar produced by a forward pass. If ``params`` is
    given, registered parameters the loss does not depend on get an exact
    zero gradient, so optimizers can treat the set uniformly.
    """
    if loss.data.size != 1:
        raise GraphError(f"backward requires a scalar loss, got shape {loss.shape}")
    if loss._done:
        raise GraphError("backward called twice on the same graph; re-run the forward pass")
    loss._done = True

    # iterative topological order over tensors that carry graph records
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in visited or not node.requires_grad:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited and p.requires_grad:
                stack.append((p, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is None or node.grad is None:
            continue
        grads = node._backward(node.grad)
        for parent, g in zip(node._parents, grads):
            if not parent.requires_grad or g is None:
                continue
            if parent.grad is None:
                # no copy needed: gradients are only ever reassigned, never
                # mutated in place, so aliasing the child's buffer is safe
                parent.grad = g if isinstance(g, np.ndarray) else np.asarray(g)
            else:
                parent.grad = parent.grad + g

    if params is not None:
        for name, p in params.items():
            if p.grad is None:
                p.grad = np.zeros_like(p.data)


# ---------------------------------------------------------------------------
# parameters and optimizers
# ---------------------------------------------------------------------------


class ParamSet:
    """Named registry of trainable tensors with snapshot/restore support."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self.step_count = 0

    def register(self, name: str, value) -> Tensor:
        if name in self._params:
            raise ValueError(f"parameter '{name}' already registered")
        t = Tensor(np.array(value, dtype=np.float64, copy=True), requires_grad=True)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self):
        return list(self._params)

    def items(self):
        return self._params.items()

    def tensors(self):
        return list(self._params.values())

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad = None

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self._params.items()}

    def restore(self, snap: dict[str, np.ndarray]) -> None:
        if set(snap) != set(self._params):
            raise ValueError("snapshot keys do not match registered parameters")
        for k, v in snap.items():
            self._params[k].data = v.copy()

    def as_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self._params.items()}


class SGD:
    """Plain gradient descent: p <- p - lr * grad."""

    def __init__(self, lr: float):
        if lr < 0:
            raise ValueError("learning rate must be >= 0")
        self.lr = lr

    def step(self, params: ParamSet) -> None:
        for name, p in params.items():
            if p.grad is None:
                raise GraphError(f"parameter '{name}' has no gradient; run backward first")
            p.data = p.data - self.lr * p.grad
        params.step_count += 1


class Adam:
    """Adaptive-moment gradient descent with bias correction."""

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        if lr <= 0:
            raise ValueError("learning rate must be > 0")
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}

    def step(self, params: ParamSet) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1**self.t
        bc2 = 1.0 - b2**self.t
        for name, p in params.items():
            if p.grad is None:
                raise GraphError(f"parameter '{name}' has no gradient; run backward first")
            g = p.grad
            m = self._m.get(name)
            if m is None:
                m = np.zeros_like(p.data)
                self._m[name] = m
                self._v[name] = np.zeros_like(p.data)
            v = self._v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            p.data = p.data - self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
        params.step_count += 1


def make_optimizer(kind: str, lr: float):
    if kind == "sgd":
        return SGD(lr)
    if kind == "adam":
        return Adam(lr)
    raise ValueError(f"unknown optimizer '{kind}' (expected 'sgd' or 'adam')")


# ---------------------------------------------------------------------------
# layer helpers
# ---------------------------------------------------------------------------


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    out = matmul(x, w)
    if b is not None:
        out = add(out, b)
    return out


def l2_normalize(x: Tensor, eps: float = 1e-18) -> Tensor:
    """Scale rows of x to unit L2 norm (last axis)."""
    norm = sqrt(add(tsum(square(x), axis=-1, keepdims=True), eps))
    return div(x, norm)
