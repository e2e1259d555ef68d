"""Dense tensors with tape-based reverse-mode differentiation.

Values are stored as numpy arrays, float64 by default (float32 is opt-in via
``set_default_dtype``). Shape checking is strict: elementwise ops require
identical shapes, and broadcasting happens only through the explicit
``broadcast_to`` op. Every op checks its output for NaN/Inf and raises
``NumericError`` instead of letting garbage propagate.

Gradients accumulate across ``GradTape.backward`` calls; ``Tensor.zero_grad``
resets them. A tape is single-owner: never share one across concurrent
training steps (read-only tensors may be shared freely).
"""

from __future__ import annotations

import math
import threading
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ConfigError, ContractError, DimensionError, NumericError

_DEFAULT_DTYPE = np.float64

# tanh-form gelu constants
GELU_SCALE = math.sqrt(2.0 / math.pi)  # 0.7978845608028654
GELU_CUBIC = 0.044715


def set_default_dtype(dtype) -> None:
    """Select the scalar precision for newly created tensors (f64 or f32)."""
    global _DEFAULT_DTYPE
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float64), np.dtype(np.float32)):
        raise ConfigError(f"unsupported default dtype {dt}; use float64 or float32")
    _DEFAULT_DTYPE = dt.type


def get_default_dtype():
    return _DEFAULT_DTYPE


class Tensor:
    """N-dimensional dense array with an optional gradient slot.

    The data buffer is frozen at construction; only ``grad`` ever changes.
    ``grad``, when present, always has the same shape as ``data``.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.array(data, dtype=dtype if dtype is not None else _DEFAULT_DTYPE)
        if any(extent <= 0 for extent in arr.shape):
            raise ContractError(f"tensor extents must be positive, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise NumericError("tensor constructed from non-finite values")
        arr.setflags(write=False)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None

    @staticmethod
    def _from_array(arr: np.ndarray, requires_grad: bool = False) -> "Tensor":
        # internal fast path: arr is freshly computed, finite-checked by _apply
        t = Tensor.__new__(Tensor)
        if arr.flags.writeable:
            arr.setflags(write=False)
        t.data = arr
        t.requires_grad = requires_grad
        t.grad = None
        return t

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
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g)
        else:
            self.grad = self.grad + g

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


class _TapeEntry:
    __slots__ = ("inputs", "output", "backward")

    def __init__(self, inputs, output, backward):
        self.inputs = inputs
        self.output = output
        self.backward = backward


_TAPES = threading.local()


def _tape_stack() -> list:
    stack = getattr(_TAPES, "stack", None)
    if stack is None:
        stack = []
        _TAPES.stack = stack
    return stack


def _active_tape() -> Optional["GradTape"]:
    stack = _tape_stack()
    return stack[-1] if stack else None


class GradTape:
    """Ordered record of operations, replayed in reverse for backpropagation.

    Use as a context manager around the forward computation, then call
    ``backward`` on the scalar result. Each backward call walks every
    recorded operation exactly once, in reverse recording order, and adds
    the resulting gradients into the ``grad`` slot of every reachable
    tensor that requires one.
    """

    def __init__(self):
        self._entries: list[_TapeEntry] = []

    def __enter__(self) -> "GradTape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise ContractError("mismatched GradTape context exit")
        stack.pop()

    def __len__(self) -> int:
        return len(self._entries)

    def _record(self, inputs, output, backward) -> None:
        self._entries.append(_TapeEntry(inputs, output, backward))

    def backward(self, root: Tensor) -> None:
        if root.size != 1:
            raise ContractError(f"backward root must be scalar, got shape {root.shape}")
        if not any(entry.output is root for entry in self._entries):
            raise ContractError("backward root was not recorded on this tape")
        flow: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
        holders: dict[int, Tensor] = {id(root): root}
        for entry in reversed(self._entries):
            out_grad = flow.get(id(entry.output))
            if out_grad is None:
                continue
            input_grads = entry.backward(out_grad)
            for tensor, g in zip(entry.inputs, input_grads):
                if g is None or not tensor.requires_grad:
                    continue
                key = id(tensor)
                if key in flow:
                    flow[key] = flow[key] + g
                else:
                    flow[key] = g
                    holders[key] = tensor
        for key, g in flow.items():
            holders[key]._accumulate_grad(g)


def _input_stats(inputs: Sequence[Tensor]) -> str:
    parts = []
    for t in inputs:
        d = t.data
        parts.append(f"shape={t.shape} min={d.min():.6g} max={d.max():.6g} mean={d.mean():.6g}")
    return "inputs: " + "; ".join(parts)


def custom_op(
    name: str,
    out_array: np.ndarray,
    inputs: Sequence[Tensor],
    backward: Callable[[np.ndarray], tuple],
) -> Tensor:
    """Wrap a computed array as a tensor and register its backward rule.

    ``backward`` receives the output gradient and must return one gradient
    array (or None) per input, each matching that input's shape.
    """
    out_array = np.asarray(out_array)
    if not np.all(np.isfinite(out_array)):
        raise NumericError(f"{name}: produced non-finite values; {_input_stats(inputs)}")
    requires = any(t.requires_grad for t in inputs)
    out = Tensor._from_array(out_array, requires_grad=requires)
    tape = _active_tape()
    if tape is not None and requires:
        tape._record(tuple(inputs), out, backward)
    return out


def _require_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# elementwise suite


def add(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape("add", a, b)
    return custom_op("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape("sub", a, b)
    return custom_op("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape("mul", a, b)
    return custom_op("mul", a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def scale(x: Tensor, c: float) -> Tensor:
    """Multiply by a python scalar constant."""
    c = float(c)
    if not math.isfinite(c):
        raise NumericError(f"scale: non-finite constant {c}")
    return custom_op("scale", x.data * c, (x,), lambda g: (g * c,))


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(x.data)
    return custom_op("exp", out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x.data)
    return custom_op("log", out, (x,), lambda g: (g / x.data,))


def gelu(x: Tensor) -> Tensor:
    """Gaussian error linear unit, tanh form:

    0.5 * x * (1 + tanh(sqrt(2/pi) * (x + 0.044715 * x^3)))
    """
    u = GELU_SCALE * (x.data + GELU_CUBIC * x.data**3)
    t = np.tanh(u)
    out = 0.5 * x.data * (1.0 + t)

    def back(g):
        du = GELU_SCALE * (1.0 + 3.0 * GELU_CUBIC * x.data**2)
        local = 0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t**2) * du
        return (g * local,)

    return custom_op("gelu", out, (x,), back)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != x.size:
        raise DimensionError(f"reshape: cannot reshape {x.shape} to {shape}")
    return custom_op("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        inverse = None
    else:
        axes = tuple(axes)
        inverse = tuple(int(i) for i in np.argsort(axes))
    out = np.transpose(x.data, axes)

    def back(g):
        return (np.transpose(g, inverse),)

    return custom_op("transpose", out, (x,), back)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not parts:
        raise ContractError("concat: need at least one tensor")
    first = parts[0]
    for p in parts[1:]:
        if p.ndim != first.ndim:
            raise DimensionError(f"concat: rank mismatch {first.shape} vs {p.shape}")
        for d in range(first.ndim):
            if d != axis % first.ndim and p.shape[d] != first.shape[d]:
                raise DimensionError(f"concat: shape mismatch {first.shape} vs {p.shape} on axis {d}")
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum(sizes)[:-1]
    out = np.concatenate([p.data for p in parts], axis=axis)

    def back(g):
        return tuple(np.split(g, offsets, axis=axis))

    return custom_op("concat", out, tuple(parts), back)


def slice_(x: Tensor, key) -> Tensor:
    """Basic indexing (ints and slices only); gradients scatter back to x."""
    if not isinstance(key, tuple):
        key = (key,)
    for k in key:
        if not isinstance(k, (int, slice)):
            raise ContractError(f"slice_: only ints and slices supported, got {type(k).__name__}")
    out = x.data[key]
    if out.size == 0:
        raise ContractError(f"slice_: empty result from key {key} on shape {x.shape}")

    def back(g):
        gx = np.zeros_like(x.data)
        gx[key] = g
        return (gx,)

    return custom_op("slice", out, (x,), back)


def _normalize_axes(axis, ndim: int):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def reduce_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axes(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return custom_op("reduce_sum", out, (x,), back)


def reduce_mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axes(axis, x.ndim)
    count = 1
    for a in axes:
        count *= x.shape[a]
    out = x.data.mean(axis=axes, keepdims=keepdims)

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy() / count,)

    return custom_op("reduce_mean", out, (x,), back)


def broadcast_to(x: Tensor, shape) -> Tensor:
    """The one sanctioned broadcast: expand to ``shape`` along trailing axes.

    The target rank must be >= the input rank; aligned trailing extents must
    match or be 1 on the input side. Backward sums over the expanded axes.
    """
    shape = tuple(int(s) for s in shape)
    if len(shape) < x.ndim:
        raise DimensionError(f"broadcast_to: target rank {len(shape)} below input rank {x.ndim}")
    pad = len(shape) - x.ndim
    for i, extent in enumerate(x.shape):
        target = shape[pad + i]
        if extent != target and extent != 1:
            raise DimensionError(f"broadcast_to: cannot expand {x.shape} to {shape}")
    out = np.broadcast_to(x.data, shape).copy()

    def back(g):
        if pad:
            g = g.sum(axis=tuple(range(pad)))
        squeeze = tuple(i for i in range(x.ndim) if x.shape[i] == 1 and g.shape[i] != 1)
        if squeeze:
            g = g.sum(axis=squeeze, keepdims=True)
        return (g,)

    return custom_op("broadcast_to", out, (x,), back)


# ---------------------------------------------------------------------------
# linear algebra and normalization


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of two rank-2 tensors."""
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul: needs rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: inner extents differ, {a.shape} vs {b.shape}")

    def back(g):
        return (g @ b.data.T, a.data.T @ g)

    with np.errstate(over="ignore", invalid="ignore"):
        out = a.data @ b.data
    return custom_op("matmul", out, (a, b), back)


def softmax(x: Tensor) -> Tensor:
    """Softmax along the last axis, computed with max-subtraction."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        inner = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - inner),)

    return custom_op("softmax", out, (x,), back)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize each vector along the last axis to zero mean and unit
    variance (biased), then apply the affine gamma/beta transform."""
    d = x.shape[-1]
    if d < 1:
        raise ContractError("layer_norm: last axis must be non-empty")
    if eps <= 0:
        raise ContractError(f"layer_norm: eps must be positive, got {eps}")
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(
            f"layer_norm: gamma/beta must have shape ({d},), got {gamma.shape} and {beta.shape}"
        )
    mean = x.data.mean(axis=-1, keepdims=True)
    var = ((x.data - mean) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean) * inv
    out = gamma.data * xhat + beta.data
    lead_axes = tuple(range(x.ndim - 1))

    def back(g):
        gy = g * gamma.data
        gx = inv * (gy - gy.mean(axis=-1, keepdims=True) - xhat * (gy * xhat).mean(axis=-1, keepdims=True))
        ggamma = (g * xhat).sum(axis=lead_axes) if lead_axes else g * xhat
        gbeta = g.sum(axis=lead_axes) if lead_axes else g
        return (gx, ggamma, gbeta)

    return custom_op("layer_norm", out, (x, gamma, beta), back)


# ---------------------------------------------------------------------------
# verification harness


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5) -> float:
    """Compare the taped gradient of a scalar function against central
    finite differences.

    Returns the max over coordinates of
    ``|analytic - (f(x + h e_i) - f(x - h e_i)) / 2h| / max(1, |analytic|)``.
    """
    probe = Tensor(x.data, requires_grad=True)
    with GradTape() as tape:
        y = f(probe)
    if y.size != 1:
        raise ContractError("grad_check: f must be scalar-valued")
    tape.backward(y)
    analytic = probe.grad if probe.grad is not None else np.zeros_like(probe.data)
    analytic = analytic.reshape(-1)

    flat = np.array(x.data, dtype=x.data.dtype).reshape(-1)
    worst = 0.0
    for i in range(flat.size):
        bumped = flat.copy()
        bumped[i] += h
        f_plus = f(Tensor(bumped.reshape(x.shape), dtype=x.data.dtype)).item()
        bumped[i] = flat[i] - h
        f_minus = f(Tensor(bumped.reshape(x.shape), dtype=x.data.dtype)).item()
        fd = (f_plus - f_minus) / (2.0 * h)
        rel = abs(analytic[i] - fd) / max(1.0, abs(analytic[i]))
        worst = max(worst, rel)
    return worst
