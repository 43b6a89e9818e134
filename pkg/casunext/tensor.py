"""Dense float64 tensors with reverse-mode automatic differentiation.

Every differentiable primitive is a `Function` subclass: `forward` works on raw numpy arrays and
`backward` maps the gradient of the output to one gradient per input. `Function.apply` attaches the
function to the tensor it produces, so the graph hanging off a scalar loss is the computation tape;
`Tensor.backward` replays it in reverse topological order.

Checkpoint format for a single tensor: an ASCII header line ``shape: d0 d1 ... dn`` followed by the
row-major data as little-endian float64.
"""

from __future__ import annotations

import math
import zlib
from collections.abc import Iterator, Sequence
from contextlib import contextmanager
from pathlib import Path
from typing import Any

import numpy as np

from casunext.errors import CheckpointError, GradientError, ShapeError

DTYPE = np.float64

_grad_enabled = True


@contextmanager
def no_grad() -> Iterator[None]:
    """Evaluate without recording the tape (inference, metric passes)."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def broadcast_shape(a: tuple[int, ...], b: tuple[int, ...]) -> tuple[int, ...]:
    try:
        return tuple(np.broadcast_shapes(a, b))
    except ValueError:
        raise ShapeError(f"shapes {a} and {b} are not broadcast-compatible") from None


class Function:
    """Base class for differentiable primitives."""

    def __init__(self, *tensors: Tensor):
        self.tensors = tensors

    def forward(self, *arrays: np.ndarray, **kwargs: Any) -> np.ndarray:
        raise NotImplementedError(f"{type(self).__name__} has no forward pass")

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray | None, ...]:
        raise NotImplementedError(f"{type(self).__name__} has no backward pass")

    @classmethod
    def apply(cls, *tensors: Tensor, **kwargs: Any) -> Tensor:
        func = cls(*tensors)
        out = func.forward(*(t.data for t in tensors), **kwargs)
        requires_grad = _grad_enabled and any(t.requires_grad for t in tensors)
        return Tensor(out, requires_grad=requires_grad, creator=func if requires_grad else None)

    @staticmethod
    def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
        """Sum a broadcast gradient back down to `shape`."""
        while grad.ndim > len(shape):
            grad = grad.sum(axis=0)
        for axis, size in enumerate(shape):
            if size == 1 and grad.shape[axis] != 1:
                grad = grad.sum(axis=axis, keepdims=True)
        return grad


class Tensor:
    """N-dimensional float64 array with an optional gradient record."""

    def __init__(self, data: Any, requires_grad: bool = False, creator: Function | None = None):
        self.data = np.ascontiguousarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.creator = creator
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> Tensor:
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    # -- arithmetic -------------------------------------------------------

    def __add__(self, other: Any) -> Tensor:
        return Add.apply(self, as_tensor(other))

    def __radd__(self, other: Any) -> Tensor:
        return Add.apply(as_tensor(other), self)

    def __sub__(self, other: Any) -> Tensor:
        return Sub.apply(self, as_tensor(other))

    def __rsub__(self, other: Any) -> Tensor:
        return Sub.apply(as_tensor(other), self)

    def __mul__(self, other: Any) -> Tensor:
        return Mul.apply(self, as_tensor(other))

    def __rmul__(self, other: Any) -> Tensor:
        return Mul.apply(as_tensor(other), self)

    def __truediv__(self, other: Any) -> Tensor:
        return Div.apply(self, as_tensor(other))

    def __rtruediv__(self, other: Any) -> Tensor:
        return Div.apply(as_tensor(other), self)

    def __neg__(self) -> Tensor:
        return Neg.apply(self)

    def __pow__(self, exponent: float) -> Tensor:
        return PowScalar.apply(self, exponent=float(exponent))

    def __matmul__(self, other: Tensor) -> Tensor:
        return MatMul.apply(self, other)

    def __getitem__(self, index: Any) -> Tensor:
        return GetItem.apply(self, index=index)

    # -- reductions and views --------------------------------------------

    def sum(self, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:
        return Sum.apply(self, axis=axis, keepdims=keepdims)

    def mean(self, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:
        if axis is None:
            count = self.size
        else:
            axes = (axis,) if isinstance(axis, int) else axis
            count = math.prod(self.shape[a] for a in axes)
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def reshape(self, *shape: int) -> Tensor:
        return Reshape.apply(self, shape=shape)

    def permute(self, *axes: int) -> Tensor:
        return Permute.apply(self, axes=axes)

    def exp(self) -> Tensor:
        return Exp.apply(self)

    def log(self) -> Tensor:
        return Log.apply(self)

    # -- differentiation --------------------------------------------------

    def _accumulate(self, grad: np.ndarray) -> None:
        if grad.shape != self.shape:
            grad = np.broadcast_to(grad, self.shape)
        if self.grad is None:
            self.grad = np.array(grad, dtype=DTYPE, copy=True)
        else:
            self.grad = self.grad + grad

    def backward(self) -> None:
        """Accumulate d(self)/d(t) into `t.grad` for every reachable `t` that requires grad."""
        if self.data.size != 1:
            raise GradientError(f"backward needs a scalar loss, got shape {self.shape}")
        if self._consumed:
            raise GradientError("backward already ran on this graph; rebuild the forward pass first")
        if not self.requires_grad:
            raise GradientError("loss does not depend on any tensor that requires grad")

        tape = build_tape(self)
        self._accumulate(np.ones_like(self.data))
        for node in reversed(tape):
            func = node.creator
            if func is None or node.grad is None:
                continue
            grads = func.backward(node.grad)
            for inp, g in zip(func.tensors, grads):
                if g is not None and inp.requires_grad:
                    inp._accumulate(g)

        self._consumed = True
        # Release the tape; intermediate gradients stay readable.
        for node in tape:
            if node.creator is not None:
                node.creator.tensors = ()
                node.creator = None
                node._consumed = True


def build_tape(root: Tensor) -> list[Tensor]:
    """Tensors reachable from `root` in forward (topological) order."""
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, children_done = stack.pop()
        if id(node) in visited:
            continue
        if children_done:
            visited.add(id(node))
            order.append(node)
            continue
        stack.append((node, True))
        if node.creator is not None:
            for parent in node.creator.tensors:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
    return order


def as_tensor(value: Any) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def parameter(data: Any) -> Tensor:
    return Tensor(data, requires_grad=True)


def zeros(shape: Sequence[int], requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(tuple(shape), dtype=DTYPE), requires_grad=requires_grad)


def ones(shape: Sequence[int], requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(tuple(shape), dtype=DTYPE), requires_grad=requires_grad)


# ---------------------------------------------------------------------------
# Elementwise primitives
# ---------------------------------------------------------------------------


class Add(Function):
    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        broadcast_shape(a.shape, b.shape)
        self.shapes = (a.shape, b.shape)
        return a + b

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return self.unbroadcast(grad, self.shapes[0]), self.unbroadcast(grad, self.shapes[1])


class Sub(Function):
    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        broadcast_shape(a.shape, b.shape)
        self.shapes = (a.shape, b.shape)
        return a - b

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return self.unbroadcast(grad, self.shapes[0]), self.unbroadcast(-grad, self.shapes[1])


class Mul(Function):
    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        broadcast_shape(a.shape, b.shape)
        self.a, self.b = a, b
        return a * b

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return self.unbroadcast(grad * self.b, self.a.shape), self.unbroadcast(grad * self.a, self.b.shape)


class Div(Function):
    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        broadcast_shape(a.shape, b.shape)
        self.a, self.b = a, b
        return a / b

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        ga = grad / self.b
        gb = -grad * self.a / (self.b * self.b)
        return self.unbroadcast(ga, self.a.shape), self.unbroadcast(gb, self.b.shape)


class Neg(Function):
    def forward(self, x: np.ndarray) -> np.ndarray:
        return -x

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray]:
        return (-grad,)


class PowScalar(Function):
    def forward(self, x: np.ndarray, exponent: float) -> np.ndarray:
        self.x, self.exponent = x, exponent
        return x**exponent

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray]:
        return (grad * self.exponent * self.x ** (self.exponent - 1.0),)


class Exp(Function):
    def forward(self, x: np.ndarray) -> np.ndarray:
        self.out = np.exp(x)
        return self.out

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray]:
        return (grad * self.out,)


class Log(Function):
    def forward(self, x: np.ndarray) -> np.ndarray:
        self.x = x
        return np.log(x)

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray]:
        return (grad / self.x,)


class Sigmoid(Function):
    def forward(self, x: np.ndarray) -> np.ndarray:
        # exp of non-positive arguments only
        e = np.exp(-np.abs(x))
        self.out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
        return self.out

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray]:
        return (grad * self.out * (1.0 - self.out),)


class Tanh(Function):
    def forward(self, x: np.ndarray) -> np.ndarray:
        self.out = np.tanh(x)
        return self.out

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray]:
        return (grad * (1.0 - self.out * self.out),)


class ReLU(Function):
    def forward(self, x: np.ndarray) -> np.ndarray:
        self.mask = x > 0
        return np.where(self.mask, x, 0.0)

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray]:
        return (grad * self.mask,)


# ---------------------------------------------------------------------------
# Linear algebra, reductions, shape manipulation
# ---------------------------------------------------------------------------


class MatMul(Function):
    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        if a.ndim != 2 or b.ndim != 2:
            raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
        if a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
        self.a, self.b = a, b
        return a @ b

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return grad @ self.b.T, self.a.T @ grad


class Sum(Function):
    def forward(self, x: np.ndarray, axis: int | tuple[int, ...] | None, keepdims: bool) -> np.ndarray:
        self.in_shape = x.shape
        self.axis, self.keepdims = axis, keepdims
        return np.asarray(x.sum(axis=axis, keepdims=keepdims))

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray]:
        if self.axis is not None and not self.keepdims:
            axes = (self.axis,) if isinstance(self.axis, int) else self.axis
            grad = np.expand_dims(grad, tuple(a % len(self.in_shape) for a in axes))
        return (np.broadcast_to(grad, self.in_shape),)


class Reshape(Function):
    def forward(self, x: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
        self.in_shape = x.shape
        try:
            return x.reshape(shape)
        except ValueError:
            raise ShapeError(f"cannot reshape {x.shape} into {shape}") from None

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray]:
        return (grad.reshape(self.in_shape),)


class Permute(Function):
    def forward(self, x: np.ndarray, axes: tuple[int, ...]) -> np.ndarray:
        self.axes = axes
        return x.transpose(axes)

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray]:
        return (grad.transpose(np.argsort(self.axes)),)


class GetItem(Function):
    def forward(self, x: np.ndarray, index: Any) -> np.ndarray:
        self.in_shape, self.index = x.shape, index
        return np.array(x[index], copy=True)

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray]:
        out = np.zeros(self.in_shape, dtype=DTYPE)
        np.add.at(out, self.index, grad)
        return (out,)


class Concat(Function):
    def forward(self, *arrays: np.ndarray, axis: int) -> np.ndarray:
        reference = arrays[0].shape
        for arr in arrays[1:]:
            if arr.ndim != len(reference) or any(
                s != r for i, (s, r) in enumerate(zip(arr.shape, reference)) if i != axis % len(reference)
            ):
                raise ShapeError(f"cannot concatenate {reference} with {arr.shape} along axis {axis}")
        self.axis = axis
        self.splits = np.cumsum([a.shape[axis] for a in arrays])[:-1]
        return np.concatenate(arrays, axis=axis)

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray, ...]:
        return tuple(np.split(grad, self.splits, axis=self.axis))


class LogSoftmax(Function):
    def forward(self, x: np.ndarray, axis: int) -> np.ndarray:
        shifted = x - x.max(axis=axis, keepdims=True)
        out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
        self.axis, self.softmax = axis, np.exp(out)
        return out

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray]:
        return (grad - self.softmax * grad.sum(axis=self.axis, keepdims=True),)


class Softmax(Function):
    def forward(self, x: np.ndarray, axis: int) -> np.ndarray:
        shifted = np.exp(x - x.max(axis=axis, keepdims=True))
        self.axis = axis
        self.out = shifted / shifted.sum(axis=axis, keepdims=True)
        return self.out

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray]:
        return (self.out * (grad - (grad * self.out).sum(axis=self.axis, keepdims=True)),)


# ---------------------------------------------------------------------------
# Functional API
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    return Add.apply(a, b)


def sub(a: Tensor, b: Tensor) -> Tensor:
    return Sub.apply(a, b)


def mul(a: Tensor, b: Tensor) -> Tensor:
    return Mul.apply(a, b)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return MatMul.apply(a, b)


def sigmoid(x: Tensor) -> Tensor:
    return Sigmoid.apply(x)


def tanh(x: Tensor) -> Tensor:
    return Tanh.apply(x)


def relu(x: Tensor) -> Tensor:
    return ReLU.apply(x)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    return Concat.apply(*tensors, axis=axis)


def log_softmax(x: Tensor, axis: int = 1) -> Tensor:
    return LogSoftmax.apply(x, axis=axis)


def softmax(x: Tensor, axis: int = 1) -> Tensor:
    return Softmax.apply(x, axis=axis)


# ---------------------------------------------------------------------------
# Seeded generators
# ---------------------------------------------------------------------------


def rng_for(seed: int, *names: str) -> np.random.Generator:
    """Independent generator for the named stream under a run seed.

    Streams are keyed by name, not by creation order, so adding a layer never shifts the
    initialization of the others.
    """
    keys = tuple(zlib.crc32(name.encode("utf-8")) for name in names)
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=keys))


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------


def encode_tensor(tensor: Tensor) -> bytes:
    header = "shape: " + " ".join(str(d) for d in tensor.shape) + "\n"
    return header.encode("ascii") + tensor.data.astype("<f8").tobytes()


def decode_tensor(raw: bytes, source: str = "<bytes>") -> Tensor:
    newline = raw.find(b"\n")
    if newline < 0 or not raw.startswith(b"shape:"):
        raise CheckpointError(f"{source}: missing 'shape:' header line")
    try:
        shape = tuple(int(tok) for tok in raw[len(b"shape:") : newline].decode("ascii").split())
    except ValueError:
        raise CheckpointError(f"{source}: malformed shape header") from None
    data = np.frombuffer(raw[newline + 1 :], dtype="<f8")
    if data.size != math.prod(shape):
        raise CheckpointError(f"{source}: header says {shape} but found {data.size} values")
    return Tensor(data.reshape(shape).copy())


def save_tensor(path: Path, tensor: Tensor) -> None:
    Path(path).write_bytes(encode_tensor(tensor))


def load_tensor(path: Path) -> Tensor:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"tensor file not found: {path}")
    return decode_tensor(path.read_bytes(), source=str(path))
