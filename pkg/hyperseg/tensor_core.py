"""Dense double-precision tensors with tape-based reverse-mode differentiation.

Every differentiable operation in this module records a node on the active
``GradTape`` when at least one input requires a gradient. ``GradTape.backward``
walks the recorded nodes in reverse append order, so a single forward pass
inside ``with GradTape() as tape:`` is all the bookkeeping a caller needs::

    with GradTape() as tape:
        loss = reduce_sum(sigmoid(matmul(x, w)))
    tape.backward(loss)
    w.grad  # populated

Tapes are thread-local: distinct samples may be evaluated on independent
tapes in worker threads while sharing read-only parameter tensors.
"""

import logging
import math
import threading
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import expit

from .errors import ConfigError, NonFiniteError, ShapeError

logger = logging.getLogger(__name__)

Operand = Union["Tensor", float, int]
Backward = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]

_LN2 = math.log(2.0)
_local = threading.local()


class Tensor:
    """Immutable n-dimensional float64 array with an optional tape handle."""

    __slots__ = ("data", "grad", "requires_grad", "tape_id", "name")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        array = np.array(data, dtype=np.float64)
        _check_finite(array, "tensor construction")
        self.data: np.ndarray = array
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.tape_id: Optional[int] = None
        self.name = name

    @classmethod
    def _wrap(cls, array: np.ndarray, requires_grad: bool = False) -> "Tensor":
        out = cls.__new__(cls)
        out.data = np.asarray(array, dtype=np.float64)
        out.grad = None
        out.requires_grad = requires_grad
        out.tape_id = None
        out.name = None
        return out

    @property
    def shape(self) -> Tuple[int, ...]:
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

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flags = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flags})"

    def __add__(self, other: Operand) -> "Tensor":
        return add(self, other)

    def __radd__(self, other: Operand) -> "Tensor":
        return add(other, self)

    def __sub__(self, other: Operand) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other: Operand) -> "Tensor":
        return sub(other, self)

    def __mul__(self, other: Operand) -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other: Operand) -> "Tensor":
        return mul(other, self)

    def __truediv__(self, other: Operand) -> "Tensor":
        return div(self, other)

    def __rtruediv__(self, other: Operand) -> "Tensor":
        return div(other, self)

    def __neg__(self) -> "Tensor":
        return scalar_mul(self, -1.0)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


@dataclass
class TapeNode:
    """One recorded operation: kind, inputs, produced output, local backward."""
    kind: str
    inputs: Tuple[Tensor, ...]
    output: Tensor
    backward: Backward


class GradTape:
    """Append-only record of one forward pass."""

    def __init__(self):
        self.nodes: List[TapeNode] = []
        self._grads: Dict[int, Tuple[Tensor, np.ndarray]] = {}
        self._leaves: Dict[int, Tensor] = {}

    def __enter__(self) -> "GradTape":
        stack = _tape_stack()
        stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def record(self, kind: str, inputs: Tuple[Tensor, ...], output: Tensor, backward: Backward) -> int:
        for tensor in inputs:
            if tensor.requires_grad and tensor.tape_id is None:
                self._leaves[id(tensor)] = tensor
        self.nodes.append(TapeNode(kind, inputs, output, backward))
        return len(self.nodes) - 1

    def backward(self, loss: Tensor, populate: bool = True) -> None:
        """Propagate d(loss)/d(.) to every tensor recorded on this tape.

        With ``populate`` the gradients are accumulated into ``.grad`` of the
        leaves; otherwise they stay on the tape and are read with ``grad_of``.
        """
        if loss.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        self._grads = {id(loss): (loss, np.ones_like(loss.data))}

        for node in reversed(self.nodes):
            entry = self._grads.get(id(node.output))
            if entry is None:
                continue
            input_grads = node.backward(entry[1])
            for tensor, grad in zip(node.inputs, input_grads):
                if grad is None or not tensor.requires_grad:
                    continue
                key = id(tensor)
                if key in self._grads:
                    self._grads[key] = (tensor, self._grads[key][1] + grad)
                else:
                    self._grads[key] = (tensor, np.asarray(grad, dtype=np.float64).reshape(tensor.shape))

        if populate:
            for leaf in self._leaves.values():
                grad = self.grad_of(leaf)
                leaf.grad = grad if leaf.grad is None else leaf.grad + grad

    def grad_of(self, tensor: Tensor) -> np.ndarray:
        entry = self._grads.get(id(tensor))
        if entry is None:
            return np.zeros_like(tensor.data)
        return entry[1]

    def leaves(self) -> List[Tensor]:
        return list(self._leaves.values())


def _tape_stack() -> List[GradTape]:
    stack = getattr(_local, "tapes", None)
    if stack is None:
        stack = []
        _local.tapes = stack
    return stack


def current_tape() -> Optional[GradTape]:
    stack = _tape_stack()
    return stack[-1] if stack else None


def _check_finite(array: np.ndarray, kind: str) -> None:
    if not np.all(np.isfinite(array)):
        raise NonFiniteError(f"{kind} produced non-finite values")


def _emit(kind: str, data: np.ndarray, inputs: Tuple[Tensor, ...], backward: Backward) -> Tensor:
    _check_finite(data, kind)
    tape = current_tape()
    needs_grad = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor._wrap(data, requires_grad=needs_grad)
    if needs_grad:
        out.tape_id = tape.record(kind, inputs, out, backward)
    return out


def as_tensor(value: Operand) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def constant(value) -> Tensor:
    return Tensor(value)


def zeros(shape: Sequence[int]) -> Tensor:
    return Tensor._wrap(np.zeros(tuple(shape)))


def ones(shape: Sequence[int]) -> Tensor:
    return Tensor._wrap(np.ones(tuple(shape)))


def _binary_operands(a: Operand, b: Operand, kind: str) -> Tuple[Tensor, Tensor]:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise ShapeError(
            f"{kind}: shapes {a.shape} and {b.shape} differ; only identical shapes or a scalar operand are allowed"
        )
    return a, b


def _reduce_to(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    return np.asarray(grad.sum()).reshape(shape)


# Elementwise arithmetic

def add(a: Operand, b: Operand) -> Tensor:
    a, b = _binary_operands(a, b, "add")
    return _emit("add", a.data + b.data, (a, b),
                 lambda g: (_reduce_to(g, a.shape), _reduce_to(g, b.shape)))


def sub(a: Operand, b: Operand) -> Tensor:
    a, b = _binary_operands(a, b, "sub")
    return _emit("sub", a.data - b.data, (a, b),
                 lambda g: (_reduce_to(g, a.shape), _reduce_to(-g, b.shape)))


def mul(a: Operand, b: Operand) -> Tensor:
    a, b = _binary_operands(a, b, "mul")
    return _emit("mul", a.data * b.data, (a, b),
                 lambda g: (_reduce_to(g * b.data, a.shape), _reduce_to(g * a.data, b.shape)))


def div(a: Operand, b: Operand) -> Tensor:
    a, b = _binary_operands(a, b, "div")
    if np.any(b.data == 0.0):
        raise NonFiniteError("div: division by zero")
    out = a.data / b.data
    return _emit("div", out, (a, b),
                 lambda g: (_reduce_to(g / b.data, a.shape), _reduce_to(-g * out / b.data, b.shape)))


def scalar_mul(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _emit("scalar_mul", x.data * c, (x,), lambda g: (g * c,))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _emit("exp", out, (x,), lambda g: (g * out,))


def log(x: Tensor, eps: float = 0.0) -> Tensor:
    """Natural log of ``x + eps``; the argument must stay positive."""
    shifted = x.data + eps
    if np.any(shifted <= 0.0):
        raise NonFiniteError("log: argument must be positive")
    return _emit("log", np.log(shifted), (x,), lambda g: (g / shifted,))


def sqrt(x: Tensor) -> Tensor:
    if np.any(x.data < 0.0):
        raise NonFiniteError("sqrt: negative argument")
    out = np.sqrt(x.data)

    def backward(g):
        grad = np.zeros_like(out)
        np.divide(g, 2.0 * out, out=grad, where=out > 0.0)
        return (grad,)

    return _emit("sqrt", out, (x,), backward)


def sigmoid(x: Tensor) -> Tensor:
    out = expit(x.data)
    return _emit("sigmoid", out, (x,), lambda g: (g * out * (1.0 - out),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0.0
    return _emit("relu", np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def silu(x: Tensor) -> Tensor:
    s = expit(x.data)
    return _emit("silu", x.data * s, (x,), lambda g: (g * (s + x.data * s * (1.0 - s)),))


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    inside = (x.data >= lo) & (x.data <= hi)
    return _emit("clip", np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,))


def power_of_two(x: Tensor) -> Tensor:
    """2**x, computed as exp(x ln 2)."""
    return exp(scalar_mul(x, _LN2))


# Linear algebra and shape manipulation

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    return _emit("matmul", a.data @ b.data, (a, b),
                 lambda g: (g @ b.data.T, a.data.T @ g))


def transpose(x: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _emit("transpose", np.transpose(x.data, axes), (x,),
                 lambda g: (np.transpose(g, inverse),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError as e:
        raise ShapeError(f"cannot reshape {x.shape} to {tuple(shape)}: {e}")
    return _emit("reshape", out, (x,), lambda g: (g.reshape(x.shape),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    if not tensors:
        raise ShapeError("concat needs at least one tensor")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise ShapeError(f"concat: {e}")
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _emit("concat", out, tensors, lambda g: tuple(np.split(g, bounds, axis=axis)))


def stack(tensors: Sequence[Tensor]) -> Tensor:
    return concat([reshape(t, (1,) + t.shape) for t in tensors], axis=0)


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)

    def backward(g):
        grad = np.zeros_like(x.data)
        grad[index] = g
        return (grad,)

    return _emit("slice", x.data[index], (x,), backward)


def _expand_reduced(g: np.ndarray, shape: Tuple[int, ...], axis, keepdims: bool) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(np.asarray(g).reshape((1,) * len(shape)), shape)
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    axes = tuple(a % len(shape) for a in axes)
    if not keepdims:
        for a in sorted(axes):
            g = np.expand_dims(g, a)
    return np.broadcast_to(g, shape)


def reduce_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.sum(x.data, axis=axis, keepdims=keepdims)
    return _emit("reduce_sum", np.asarray(out), (x,),
                 lambda g: (np.array(_expand_reduced(g, x.shape, axis, keepdims)),))


def reduce_mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([x.shape[a] for a in axes]))
    return scalar_mul(reduce_sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def softmax(z: Tensor, axis: int = -1) -> Tensor:
    """Softmax along ``axis``; the per-slice max is subtracted first."""
    shifted = z.data - np.max(z.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / np.sum(e, axis=axis, keepdims=True)
    return _emit("softmax", out, (z,),
                 lambda g: (out * (g - np.sum(g * out, axis=axis, keepdims=True)),))


def logsumexp(x: Tensor, axis: int = -1) -> Tensor:
    """log(sum(exp(x))) along ``axis``, keeping precision when one term dominates."""
    axis = axis % x.ndim
    peak = np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(x.data - peak)
    top = np.argmax(x.data, axis=axis)
    tail = e.copy()
    np.put_along_axis(tail, np.expand_dims(top, axis), 0.0, axis=axis)
    out = np.squeeze(peak, axis=axis) + np.log1p(np.sum(tail, axis=axis))
    weights = e / np.sum(e, axis=axis, keepdims=True)
    return _emit("logsumexp", out, (x,),
                 lambda g: (np.expand_dims(g, axis) * weights,))


# Image operators

def conv2d(x: Tensor, w: Tensor, bias: Optional[Tensor] = None,
           dilation: int = 1, stride: int = 1) -> Tensor:
    """Dilated cross-correlation with zero "same" padding.

    x is C_in x H x W, w is C_out x C_in x k x k, output C_out x ceil(H/stride) x ceil(W/stride).
    """
    if w.ndim != 4 or w.shape[2] != w.shape[3]:
        raise ShapeError(f"conv2d weight must be C_out x C_in x k x k, got {w.shape}")
    k = w.shape[2]
    if k % 2 == 0:
        raise ConfigError(f"conv2d kernel size must be odd, got {k}")
    if dilation < 1 or stride < 1:
        raise ConfigError(f"conv2d needs dilation >= 1 and stride >= 1, got {dilation}, {stride}")
    if x.ndim != 3 or x.shape[0] != w.shape[1]:
        raise ShapeError(f"conv2d input {x.shape} does not match weight {w.shape}")

    c_in, height, width = x.shape
    c_out = w.shape[0]
    pad = dilation * (k - 1) // 2
    out_h = (height + stride - 1) // stride
    out_w = (width + stride - 1) // stride
    padded = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad)))

    windows = []
    cols = np.empty((c_in, k, k, out_h, out_w))
    for ky in range(k):
        for kx in range(k):
            r0, c0 = ky * dilation, kx * dilation
            window = (slice(None),
                      slice(r0, r0 + stride * (out_h - 1) + 1, stride),
                      slice(c0, c0 + stride * (out_w - 1) + 1, stride))
            windows.append((ky, kx, window))
            cols[:, ky, kx] = padded[window]
    cols = cols.reshape(c_in * k * k, out_h * out_w)
    w2 = w.data.reshape(c_out, -1)
    out = (w2 @ cols).reshape(c_out, out_h, out_w)
    if bias is not None:
        if bias.shape != (c_out,):
            raise ShapeError(f"conv2d bias must have shape ({c_out},), got {bias.shape}")
        out = out + bias.data[:, None, None]

    def backward(g):
        g2 = g.reshape(c_out, -1)
        grad_w = (g2 @ cols.T).reshape(w.shape)
        dcols = (w2.T @ g2).reshape(c_in, k, k, out_h, out_w)
        grad_padded = np.zeros_like(padded)
        for ky, kx, window in windows:
            grad_padded[window] += dcols[:, ky, kx]
        grad_x = grad_padded[:, pad:pad + height, pad:pad + width]
        if bias is None:
            return grad_x, grad_w
        return grad_x, grad_w, g.sum(axis=(1, 2))

    inputs = (x, w) if bias is None else (x, w, bias)
    return _emit("conv2d", out, inputs, backward)


@lru_cache(maxsize=256)
def _bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    # align-corners=false: output pixel centres map onto input pixel centres
    matrix = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for i in range(n_out):
        src = max((i + 0.5) * scale - 0.5, 0.0)
        i0 = min(int(math.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        frac = src - i0
        matrix[i, i0] += 1.0 - frac
        matrix[i, i1] += frac
    matrix.setflags(write=False)
    return matrix


@lru_cache(maxsize=256)
def _nearest_matrix(n_in: int, n_out: int) -> np.ndarray:
    matrix = np.zeros((n_out, n_in))
    for i in range(n_out):
        matrix[i, min(int(math.floor(i * n_in / n_out)), n_in - 1)] = 1.0
    matrix.setflags(write=False)
    return matrix


def _resize_with(x: Tensor, size: Tuple[int, int], kind: str, builder) -> Tensor:
    if x.ndim not in (2, 3):
        raise ShapeError(f"{kind} expects H x W or C x H x W, got {x.shape}")
    out_h, out_w = int(size[0]), int(size[1])
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"{kind} target must be at least 1 x 1, got {size}")
    rows = builder(x.shape[-2], out_h)
    cols = builder(x.shape[-1], out_w)
    out = rows @ x.data @ cols.T
    return _emit(kind, out, (x,), lambda g: (rows.T @ g @ cols,))


def bilinear_resize(x: Tensor, size: Tuple[int, int]) -> Tensor:
    return _resize_with(x, size, "bilinear_resize", _bilinear_matrix)


def nearest_resize(x: Tensor, size: Tuple[int, int]) -> Tensor:
    return _resize_with(x, size, "nearest_resize", _nearest_matrix)


def area_downsample(x: Tensor, factor: int) -> Tensor:
    """Block mean over ``factor`` x ``factor`` tiles of the last two axes."""
    if factor == 1:
        return x
    height, width = x.shape[-2], x.shape[-1]
    if height % factor or width % factor:
        raise ShapeError(f"area_downsample: {height}x{width} is not divisible by {factor}")
    lead = x.shape[:-2]
    blocks = x.data.reshape(lead + (height // factor, factor, width // factor, factor))
    out = blocks.mean(axis=(-3, -1))

    def backward(g):
        spread = np.repeat(np.repeat(g, factor, axis=-2), factor, axis=-1)
        return (spread / (factor * factor),)

    return _emit("area_downsample", out, (x,), backward)


# Verification harness

def _evaluate(f: Callable[[Tensor], Tensor], data: np.ndarray) -> float:
    try:
        value = f(Tensor._wrap(data.copy()))
    except NonFiniteError as e:
        raise NonFiniteError(f"grad_check: function evaluation failed: {e}")
    result = value.item()
    if not math.isfinite(result):
        raise NonFiniteError("grad_check: function returned a non-finite value")
    return result


def _max_relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences."""
    base = np.array(x.data, dtype=np.float64)
    leaf = Tensor(base, requires_grad=True)
    with GradTape() as tape:
        y = f(leaf)
    if y.size != 1:
        raise ShapeError(f"grad_check needs a scalar-valued function, got shape {y.shape}")
    if not math.isfinite(y.item()):
        raise NonFiniteError("grad_check: function returned a non-finite value")
    tape.backward(y, populate=False)
    analytic = tape.grad_of(leaf)

    numeric = np.empty_like(base)
    for index in np.ndindex(base.shape):
        plus = base.copy()
        plus[index] += h
        minus = base.copy()
        minus[index] -= h
        numeric[index] = (_evaluate(f, plus) - _evaluate(f, minus)) / (2.0 * h)
    return _max_relative_error(analytic, numeric)


def spot_check(f: Callable[[], Tensor], params: Sequence[Tensor],
               coords: Sequence[Tuple[int, Tuple[int, ...]]], h: float = 1e-5) -> float:
    """Finite-difference check of selected parameter entries.

    ``coords`` lists (parameter index, element index) pairs. Parameter data is
    perturbed in place and restored.
    """
    with GradTape() as tape:
        y = f()
    tape.backward(y, populate=False)

    analytic, numeric = [], []
    for param_index, element in coords:
        param = params[param_index]
        analytic.append(tape.grad_of(param)[element])
        original = param.data[element]
        param.data[element] = original + h
        plus = f().item()
        param.data[element] = original - h
        minus = f().item()
        param.data[element] = original
        numeric.append((plus - minus) / (2.0 * h))
    return _max_relative_error(np.array(analytic), np.array(numeric))
