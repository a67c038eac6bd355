"""
Reverse-mode differentiation over dense float64 tensors.

Primitives run eagerly on numpy arrays. While a `Tape` is active every primitive whose
output depends on a differentiable input is recorded in order, and `backward` replays
the record in reverse to accumulate gradients into the leaf tensors.
"""

import contextvars
from dataclasses import dataclass
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from utils.errors import DimensionError, NumericalError, UsageError

DTYPE = np.float64

ArrayLike = Union[np.ndarray, float, int, Sequence]

_active_tape: contextvars.ContextVar = contextvars.ContextVar("active_tape", default=None)


class Tensor:
    """A dense row-major array with an optional gradient buffer"""

    def __init__(self, data: ArrayLike, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.array(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return int(self.data.size)

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, _lift(other))

    def __rmul__(self, other):
        return mul(_lift(other), self)

    def __neg__(self):
        return mul(self, constant(-1.0))

    def __matmul__(self, other):
        return matmul(self, other)


def constant(value: ArrayLike) -> Tensor:
    """A tensor that never receives a gradient"""
    return Tensor(value, requires_grad=False)


def _lift(value) -> Tensor:
    return value if isinstance(value, Tensor) else constant(value)


@dataclass
class Node:
    """One recorded primitive application"""

    op: str
    inputs: Tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


class Tape:
    """
    Ordered record of the primitives applied during one forward pass.

    Use as a context manager; the tape is active only inside the `with` block and only
    for the current thread or task.
    """

    def __init__(self):
        self.nodes: List[Node] = []
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _active_tape.reset(self._token)
        self._token = None
        return False

    def __len__(self) -> int:
        return len(self.nodes)

    def __iter__(self):
        return iter(self.nodes)

    def record(self, node: Node):
        self.nodes.append(node)

    def ops(self) -> List[str]:
        return [node.op for node in self.nodes]


def active_tape() -> Optional[Tape]:
    return _active_tape.get()


def _emit(op: str, inputs: Sequence[Tensor], out_data: np.ndarray,
          backward_fn: Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]) -> Tensor:
    requires_grad = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=requires_grad)
    tape = _active_tape.get()
    if tape is not None and requires_grad:
        tape.record(Node(op, tuple(inputs), out, backward_fn))
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`"""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(op: str, a: Tensor, b: Tensor):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes do not broadcast", a.shape, b.shape)


def _normalize_axes(axes: Union[int, Iterable[int], None], ndim: int, op: str) -> Tuple[int, ...]:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    axes = tuple(axes)
    normalized = []
    for axis in axes:
        if not -ndim <= axis < ndim:
            raise UsageError(f"{op}: axis {axis} out of range for {ndim}-d tensor")
        normalized.append(axis % ndim)
    return tuple(sorted(set(normalized)))


# === elementwise ===

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("add", a, b)
    return _emit("add", (a, b), a.data + b.data,
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("sub", a, b)
    return _emit("sub", (a, b), a.data - b.data,
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("mul", a, b)
    return _emit("mul", (a, b), a.data * b.data,
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def scale(x: Tensor, factor: float) -> Tensor:
    return mul(x, constant(factor))


def sigmoid_values(x: np.ndarray) -> np.ndarray:
    z = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))


def _sigmoid_grad(y: np.ndarray, g: np.ndarray) -> np.ndarray:
    return g * y * (1.0 - y)


def sigmoid(x: Tensor) -> Tensor:
    y = sigmoid_values(x.data)
    return _emit("sigmoid", (x,), y, lambda g: (_sigmoid_grad(y, g),))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _emit("tanh", (x,), y, lambda g: (g * (1.0 - y * y),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _emit("relu", (x,), np.where(mask, x.data, 0.0), lambda g: (g * mask,))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _emit("exp", (x,), y, lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise NumericalError("log of a non-positive value")
    return _emit("log", (x,), np.log(x.data), lambda g: (g / x.data,))


def clip(x: Tensor, low: float, high: float) -> Tensor:
    """Clamp to [low, high]; the gradient passes only where the input is inside the range"""
    if low > high:
        raise UsageError(f"clip: low {low} exceeds high {high}")
    inside = (x.data >= low) & (x.data <= high)
    return _emit("clip", (x,), np.clip(x.data, low, high), lambda g: (g * inside,))


# === linear algebra ===

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError("matmul: inner dimensions differ", a.shape, b.shape)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _emit("matmul", (a, b), np.matmul(a.data, b.data), backward)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """xW + b over the last axis of x; leading axes are treated as rows"""
    if weight.data.ndim != 2 or x.data.ndim < 1 or x.shape[-1] != weight.shape[0]:
        raise DimensionError("linear: input does not match weight", x.shape, weight.shape)
    if bias is not None and bias.shape != (weight.shape[1],):
        raise DimensionError("linear: bias does not match weight", bias.shape, weight.shape)

    d_in, d_out = weight.shape
    out = np.matmul(x.data, weight.data)
    if bias is not None:
        out = out + bias.data

    def backward(g):
        rows = g.reshape(-1, d_out)
        gx = np.matmul(g, weight.data.T)
        gw = np.matmul(x.data.reshape(-1, d_in).T, rows)
        if bias is None:
            return gx, gw
        return gx, gw, rows.sum(axis=0)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _emit("linear", inputs, out, backward)


def transpose(x: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.data.ndim)))
    axes = tuple(axes)
    if sorted(a % x.data.ndim for a in axes) != list(range(x.data.ndim)):
        raise UsageError(f"transpose: {axes} is not a permutation of {x.data.ndim} axes")
    inverse = tuple(np.argsort(axes))
    return _emit("transpose", (x,), np.transpose(x.data, axes), lambda g: (np.transpose(g, inverse),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError:
        raise DimensionError("reshape: element count differs", x.shape, tuple(shape))
    return _emit("reshape", (x,), out, lambda g: (g.reshape(x.shape),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise UsageError("concat: nothing to concatenate")
    ndim = tensors[0].data.ndim
    axis = _normalize_axes(axis, ndim, "concat")[0]
    for t in tensors[1:]:
        if t.data.ndim != ndim or any(t.shape[i] != tensors[0].shape[i] for i in range(ndim) if i != axis):
            raise DimensionError("concat: shapes differ off the concat axis", tensors[0].shape, t.shape)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _emit("concat", tuple(tensors), np.concatenate([t.data for t in tensors], axis=axis), backward)


# === reductions ===

def _expand(g: np.ndarray, shape: Tuple[int, ...], axes: Tuple[int, ...], keepdims: bool) -> np.ndarray:
    if not keepdims:
        for axis in axes:
            g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def sum(x: Tensor, axes: Union[int, Sequence[int], None] = None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axes(axes, x.data.ndim, "sum")
    out = x.data.sum(axis=axes, keepdims=keepdims)
    return _emit("sum", (x,), out, lambda g: (_expand(np.asarray(g), x.shape, axes, keepdims).copy(),))


def mean(x: Tensor, axes: Union[int, Sequence[int], None] = None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axes(axes, x.data.ndim, "mean")
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    out = x.data.mean(axis=axes, keepdims=keepdims)
    return _emit("mean", (x,), out,
                 lambda g: (_expand(np.asarray(g), x.shape, axes, keepdims) / count,))


def softmax(x: Tensor, axes: Union[int, Sequence[int]]) -> Tensor:
    """Softmax jointly over `axes`; each slice along the remaining axes sums to 1"""
    if axes is None or (not isinstance(axes, int) and len(tuple(axes)) == 0):
        raise UsageError("softmax: axis set must not be empty")
    axes = _normalize_axes(axes, x.data.ndim, "softmax")
    shifted = x.data - x.data.max(axis=axes, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axes, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axes, keepdims=True)),)

    return _emit("softmax", (x,), y, backward)


softmax_over_axes = softmax


# === backward ===

def backward(loss: Tensor, tape: Tape, params=None):
    """
    Accumulate d(loss)/d(leaf) into the `grad` buffer of every differentiable leaf.

    Gradients add to whatever the buffers already hold; call `zero_grads` between steps.
    """
    if loss.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    if params is not None:
        params.ensure_grads()
    if not loss.requires_grad:
        return

    grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    holders: Dict[int, Tensor] = {id(loss): loss}

    for node in reversed(tape.nodes):
        key = id(node.output)
        g = grads.pop(key, None)
        holders.pop(key, None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            ik = id(inp)
            if ik in grads:
                grads[ik] = grads[ik] + gi
            else:
                grads[ik] = np.array(gi, dtype=DTYPE)
                holders[ik] = inp

    for key, g in grads.items():
        leaf = holders[key]
        if leaf.grad is None:
            leaf.grad = np.zeros_like(leaf.data)
        leaf.grad = leaf.grad + g.reshape(leaf.shape)
        if not np.all(np.isfinite(leaf.grad)):
            raise NumericalError(f"non-finite gradient in {leaf.name or 'leaf tensor'}")
