"""
Dense float64 tensors with define-by-run reverse-mode differentiation.

Every operation on a `Tensor` that needs a gradient is appended to the active
`Graph` (entered with `with Graph() as graph:`). The order of `graph.nodes` is the
insertion order, which is also a valid topological order, so `backward` simply
walks the list in reverse and accumulates gradients into each input.

- Leaf tensors (parameters, constants) collect their gradient in `.grad`.
- Intermediate tensors get `.grad` filled in as the traversal reaches them.
- The graph is emptied after `backward`; build a fresh one per forward pass.

Non-finite values are treated as an error state: any op producing NaN/Inf raises
`NumericalError`, as does a non-finite gradient met during `backward`.
"""

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit


class ShapeError(ValueError):
    """Raised when tensor dimensions do not agree."""


class NumericalError(ArithmeticError):
    """Raised when NaN or Inf shows up in a forward or backward pass."""


# --- Graph bookkeeping ---
_ACTIVE_GRAPHS: list["Graph"] = []


@dataclass
class Node:
    op: str
    inputs: tuple
    input_ids: tuple
    output: "Tensor"
    backward_fn: Callable[[np.ndarray], tuple]


class Graph:
    """Ordered record of the operations of one forward pass."""

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self):
        _ACTIVE_GRAPHS.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _ACTIVE_GRAPHS.remove(self)
        return False

    def record(self, op: str, inputs: tuple, output: "Tensor", backward_fn) -> None:
        input_ids = tuple(t._node if t._graph is self else None for t in inputs)
        output._graph = self
        output._node = len(self.nodes)
        self.nodes.append(Node(op, inputs, input_ids, output, backward_fn))

    def backward(self, loss: "Tensor") -> None:
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss._graph is not self:
            raise ValueError("loss was not produced inside this graph")

        # Leaves reachable from the graph start at zero so unreached entries read 0.
        for node in self.nodes:
            for t in node.inputs:
                if t.requires_grad and t._graph is not self and t.grad is None:
                    t.grad = np.zeros_like(t.data)

        pending = {loss._node: np.ones_like(loss.data)}
        for index in range(loss._node, -1, -1):
            upstream = pending.pop(index, None)
            if upstream is None:
                continue
            node = self.nodes[index]
            node.output.grad = upstream
            for t, g in zip(node.inputs, node.backward_fn(upstream)):
                if g is None or not t.requires_grad:
                    continue
                if not np.all(np.isfinite(g)):
                    raise NumericalError(f"non-finite gradient flowing out of '{node.op}'")
                if t._graph is self:
                    pending[t._node] = pending[t._node] + g if t._node in pending else g
                else:
                    t.grad = t.grad + g
        self.nodes.clear()


def active_graph() -> "Graph | None":
    return _ACTIVE_GRAPHS[-1] if _ACTIVE_GRAPHS else None


def backward(graph: Graph, loss: "Tensor") -> None:
    """Populates `.grad` on every requires_grad tensor that `loss` depends on."""
    graph.backward(loss)


# --- Tensor ---
class Tensor:
    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(self.data)):
            raise NumericalError(f"tensor '{name or '?'}' holds non-finite values")
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._graph: Graph | None = None
        self._node: int | None = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 else shape)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _result(op: str, data: np.ndarray, inputs: tuple, backward_fn) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NumericalError(f"'{op}' produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = np.asarray(data, dtype=np.float64)
    out.requires_grad = any(t.requires_grad for t in inputs)
    out.grad = None
    out.name = None
    out._graph = None
    out._node = None
    graph = active_graph()
    if out.requires_grad and graph is not None:
        graph.record(op, inputs, out, backward_fn)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# --- Elementwise arithmetic ---
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")
    return _result("add", a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")
    return _result("sub", a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")
    return _result("mul", a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "div")
    if np.any(b.data == 0):
        raise NumericalError("div: division by zero")
    return _result("div", a.data / b.data, (a, b),
                   lambda g: (_unbroadcast(g / b.data, a.shape),
                              _unbroadcast(-g * a.data / (b.data * b.data), b.shape)))


def neg(x) -> Tensor:
    x = as_tensor(x)
    return _result("neg", -x.data, (x,), lambda g: (-g,))


def square(x: Tensor) -> Tensor:
    return _result("square", x.data * x.data, (x,), lambda g: (2.0 * x.data * g,))


def sqrt(x: Tensor) -> Tensor:
    if np.any(x.data < 0):
        raise NumericalError("sqrt of a negative value")
    out = np.sqrt(x.data)
    return _result("sqrt", out, (x,), lambda g: (g / (2.0 * out),))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _result("exp", out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise NumericalError("log of a non-positive value")
    return _result("log", np.log(x.data), (x,), lambda g: (g / x.data,))


def sigmoid(x: Tensor) -> Tensor:
    out = expit(x.data)
    return _result("sigmoid", out, (x,), lambda g: (g * out * (1.0 - out),))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _result("tanh", out, (x,), lambda g: (g * (1.0 - out * out),))


def maximum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise max; ties send the gradient to `a`."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "maximum")
    take_a = a.data >= b.data
    return _result("maximum", np.where(take_a, a.data, b.data), (a, b),
                   lambda g: (_unbroadcast(np.where(take_a, g, 0.0), a.shape),
                              _unbroadcast(np.where(take_a, 0.0, g), b.shape)))


def where(condition: np.ndarray, a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    condition = np.asarray(condition, dtype=bool)
    return _result("where", np.where(condition, a.data, b.data), (a, b),
                   lambda g: (_unbroadcast(np.where(condition, g, 0.0), a.shape),
                              _unbroadcast(np.where(condition, 0.0, g), b.shape)))


def masked_fill(x: Tensor, mask: np.ndarray, value: float) -> Tensor:
    """Replaces entries where `mask` is True with `value`."""
    if not np.isfinite(value):
        raise NumericalError("masked_fill value must be finite")
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    return _result("masked_fill", np.where(mask, value, x.data), (x,),
                   lambda g: (np.where(mask, 0.0, g),))


def reverse_gradient(x: Tensor, strength: float = 1.0) -> Tensor:
    """Identity forward; the backward pass multiplies the gradient by -strength."""
    return _result("reverse_gradient", x.data.copy(), (x,), lambda g: (-strength * g,))


# --- Shape manipulation ---
def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs matrices, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    return _result("matmul", np.matmul(a.data, b.data), (a, b),
                   lambda g: (_unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape),
                              _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)))


def transpose(x: Tensor) -> Tensor:
    """Swaps the last two axes."""
    if x.ndim < 2:
        raise ShapeError(f"transpose needs at least 2 dims, got {x.shape}")
    return _result("transpose", np.swapaxes(x.data, -1, -2), (x,),
                   lambda g: (np.swapaxes(g, -1, -2),))


def reshape(x: Tensor, shape) -> Tensor:
    return _result("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def getitem(x: Tensor, index) -> Tensor:
    def backward_fn(g):
        grad = np.zeros_like(x.data)
        np.add.at(grad, index, g)
        return (grad,)
    return _result("slice", x.data[index], (x,), backward_fn)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    if not tensors:
        raise ShapeError("concat of an empty list")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise ShapeError(f"concat: {e}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _result("concat", out, tensors, lambda g: tuple(np.split(g, bounds, axis=axis)))


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    if not tensors:
        raise ShapeError("stack of an empty list")
    try:
        out = np.stack([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise ShapeError(f"stack: {e}") from None
    return _result("stack", out, tensors,
                   lambda g: tuple(np.take(g, i, axis=axis) for i in range(len(tensors))))


# --- Reductions ---
def reduce_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)
    return _result("reduce_sum", out, (x,), backward_fn)


def reduce_mean(x: Tensor, axis=None, keepdims: bool = False, mask: np.ndarray | None = None) -> Tensor:
    """Mean over `axis`; with `mask`, only True positions are averaged."""
    if mask is None:
        count = x.data.size if axis is None else x.shape[axis]
        return reduce_sum(x, axis, keepdims) / float(count)
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    counts = mask.sum(axis=axis, keepdims=True)
    if np.any(counts == 0):
        raise ShapeError("reduce_mean over a fully masked slice")
    weights = mask / counts
    return reduce_sum(mul(x, Tensor(weights)), axis, keepdims)


def _reduce_extreme(op: str, x: Tensor, axis, mask, keepdims: bool) -> Tensor:
    if axis is None:
        flat_mask = None if mask is None else np.broadcast_to(mask, x.shape).reshape(-1)
        return _reduce_extreme(op, reshape(x, (-1,)), 0, flat_mask, keepdims=False)
    if x.shape[axis] == 0:
        raise ShapeError(f"{op} over an empty axis")
    values = x.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        if not np.all(mask.any(axis=axis)):
            raise ShapeError(f"{op} over a fully masked slice")
        values = np.where(mask, values, -np.inf if op == "reduce_max" else np.inf)
    # argmax/argmin return the first index attaining the extreme
    picked = np.argmax(values, axis=axis) if op == "reduce_max" else np.argmin(values, axis=axis)
    picked = np.expand_dims(picked, axis)
    out = np.take_along_axis(x.data, picked, axis=axis)
    if not keepdims:
        out = np.squeeze(out, axis=axis)

    def backward_fn(g):
        grad = np.zeros_like(x.data)
        np.put_along_axis(grad, picked, g if keepdims else np.expand_dims(g, axis), axis=axis)
        return (grad,)
    return _result(op, out, (x,), backward_fn)


def reduce_max(x: Tensor, axis=None, keepdims: bool = False, mask: np.ndarray | None = None) -> Tensor:
    return _reduce_extreme("reduce_max", x, axis, mask, keepdims)


def reduce_min(x: Tensor, axis=None, keepdims: bool = False, mask: np.ndarray | None = None) -> Tensor:
    return _reduce_extreme("reduce_min", x, axis, mask, keepdims)


# --- Softmax and losses ---
def softmax(x: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Max-subtracted softmax; masked-out positions get probability 0."""
    if x.ndim == 0 or x.shape[axis] == 0:
        raise ShapeError("softmax over an empty axis")
    values = x.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        if not np.all(mask.any(axis=axis)):
            raise ShapeError("softmax over a fully masked slice")
        values = np.where(mask, values, -np.inf)
    shifted = values - values.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)
    return _result("softmax", out, (x,),
                   lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),))


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    if x.ndim == 0 or x.shape[axis] == 0:
        raise ShapeError("log_softmax over an empty axis")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    probs = np.exp(out)
    return _result("log_softmax", out, (x,),
                   lambda g: (g - probs * g.sum(axis=axis, keepdims=True),))


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """-log softmax(logits)[label]; a batch (B x C) is averaged over instances."""
    single = logits.ndim == 1
    scores = logits.data[None, :] if single else logits.data
    if scores.ndim != 2:
        raise ShapeError(f"cross_entropy needs C or B x C logits, got {logits.shape}")
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    n, num_classes = scores.shape
    if labels.shape != (n,):
        raise ShapeError(f"cross_entropy: {labels.shape[0]} labels for {n} rows")
    if np.any(labels < 0) or np.any(labels >= num_classes):
        raise ValueError(f"cross_entropy: label out of range for {num_classes} classes")
    shifted = scores - scores.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    losses = log_norm - shifted[np.arange(n), labels]

    def backward_fn(g):
        probs = np.exp(shifted - log_norm[:, None])
        probs[np.arange(n), labels] -= 1.0
        grad = probs * (g / n)
        return (grad[0] if single else grad,)
    return _result("cross_entropy", np.asarray(losses.mean()), (logits,), backward_fn)


# --- Composites ---
def normalize_rows(x: Tensor, eps: float = 1e-12) -> Tensor:
    """L2-normalizes along the last axis; all-zero rows stay zero."""
    norms = sqrt(reduce_sum(square(x), axis=-1, keepdims=True) + eps)
    return x / norms


def squared_frobenius(x: Tensor, axes=(-2, -1)) -> Tensor:
    out = square(x)
    for axis in sorted((a % x.ndim for a in axes), reverse=True):
        out = reduce_sum(out, axis=axis)
    return out
