"""Tape-based reverse-mode automatic differentiation over dense float64 arrays.

Operations record themselves on the active :class:`Tape` (define-by-run).
Outside a ``with Tape():`` block nothing is recorded, which is how inference,
evaluation and BN statistics adaptation run without building a graph.

    >>> x = Tensor([1.0, 1.0], requires_grad=True)
    >>> with Tape():
    ...     loss = reduce_sum(scalar_scale(x, 2.0))
    >>> grads = backward(loss)
    >>> x.grad
    array([2., 2.])
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "RULES",
    "backward",
    "finite_difference_check",
    "matmul",
    "add",
    "subtract",
    "multiply",
    "scalar_scale",
    "tanh",
    "relu",
    "log",
    "exp",
    "reduce_sum",
    "reduce_mean",
    "reduce_var",
    "broadcast",
    "slice_",
    "concat",
    "transpose",
    "max_index_stopgrad",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible with a primitive."""


class Tensor:
    """Dense real array, optionally tracked for gradients."""

    __slots__ = ("values", "requires_grad", "grad", "_tape", "_derived", "__weakref__")

    def __init__(self, values, requires_grad: bool = False):
        self.values = np.array(values, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        # set when the tensor is the output of a recorded entry
        self._tape: Tape | None = None
        # True for outputs of primitives, recorded or not
        self._derived = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def is_leaf(self) -> bool:
        return self._tape is None

    def zero_grad(self) -> None:
        self.grad = None

    def numpy(self) -> np.ndarray:
        return self.values

    def item(self) -> float:
        return float(self.values)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.values!r}{flag})"

    # operator sugar; everything routes through the primitives
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return subtract(self, other)

    def __rsub__(self, other):
        return subtract(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scalar_scale(self, float(other))
        return multiply(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scalar_scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Entry:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    ctx: dict


class Tape:
    """Ordered record of primitive applications.

    Entries are appended in execution order, so every operand of entry ``i``
    is either a leaf or the output of an entry ``< i``.
    """

    _local = threading.local()

    def __init__(self):
        self.entries: list[Entry] = []
        self._prev: Tape | None = None

    def __enter__(self) -> "Tape":
        self._prev = getattr(Tape._local, "active", None)
        Tape._local.active = self
        return self

    def __exit__(self, *exc) -> None:
        Tape._local.active = self._prev
        self._prev = None

    def __len__(self) -> int:
        return len(self.entries)

    @staticmethod
    def active() -> "Tape | None":
        return getattr(Tape._local, "active", None)

    def leaves(self) -> list[Tensor]:
        seen: dict[int, Tensor] = {}
        for e in self.entries:
            for t in e.inputs:
                if t.is_leaf and t.requires_grad:
                    seen.setdefault(id(t), t)
        return list(seen.values())


# Backward rules: op -> fn(grad_out, entry) -> tuple of input grads (None to skip).
# Kept in a mutable registry so verification tooling can inject faults.
RULES: dict[str, Callable[[np.ndarray, Entry], tuple]] = {}


def _record(op: str, inputs: Sequence[Tensor], out_values: np.ndarray, **ctx) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.values = out_values
    out.grad = None
    out._tape = None
    out._derived = True
    out.requires_grad = any(t.requires_grad for t in inputs)
    tape = Tape.active()
    if tape is not None and out.requires_grad:
        tape.entries.append(Entry(op, tuple(inputs), out, ctx))
        out._tape = tape
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (reverse of numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- primitives


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return _record("matmul", (a, b), a.values @ b.values)


def _matmul_bw(g, e):
    a, b = e.inputs
    return g @ b.values.T, a.values.T @ g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    return _record("add", (a, b), a.values + b.values)


def _add_bw(g, e):
    a, b = e.inputs
    return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)


def subtract(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("subtract", a, b)
    return _record("subtract", (a, b), a.values - b.values)


def _subtract_bw(g, e):
    a, b = e.inputs
    return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)


def multiply(a, b) -> Tensor:
    """Elementwise product with numpy broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("elementwise_multiply", a, b)
    return _record("elementwise_multiply", (a, b), a.values * b.values)


def _multiply_bw(g, e):
    a, b = e.inputs
    return _unbroadcast(g * b.values, a.shape), _unbroadcast(g * a.values, b.shape)


def scalar_scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    return _record("scalar_scale", (a,), a.values * c, c=float(c))


def _scalar_scale_bw(g, e):
    return (g * e.ctx["c"],)


def tanh(a) -> Tensor:
    a = as_tensor(a)
    return _record("tanh", (a,), np.tanh(a.values))


def _tanh_bw(g, e):
    y = e.output.values
    return (g * (1.0 - y * y),)


def relu(a) -> Tensor:
    a = as_tensor(a)
    return _record("relu", (a,), np.maximum(a.values, 0.0))


def _relu_bw(g, e):
    return (g * (e.inputs[0].values > 0.0),)


def log(a) -> Tensor:
    a = as_tensor(a)
    return _record("log", (a,), np.log(a.values))


def _log_bw(g, e):
    return (g / e.inputs[0].values,)


def exp(a) -> Tensor:
    a = as_tensor(a)
    return _record("exp", (a,), np.exp(a.values))


def _exp_bw(g, e):
    return (g * e.output.values,)


def _check_axis(op, a, axis):
    if axis is not None and not -a.ndim <= axis < a.ndim:
        raise ShapeError(f"{op}: axis {axis} out of range for shape {a.shape}")


def reduce_sum(a, axis: int | None = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    _check_axis("reduce_sum", a, axis)
    return _record("reduce_sum", (a,), np.sum(a.values, axis=axis, keepdims=keepdims),
                   axis=axis, keepdims=keepdims)


def _expand_reduced(g, e):
    a = e.inputs[0]
    axis = e.ctx["axis"]
    if axis is not None and not e.ctx["keepdims"]:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, a.shape)


def _reduce_sum_bw(g, e):
    return (np.array(_expand_reduced(g, e)),)


def reduce_mean(a, axis: int | None = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    _check_axis("reduce_mean", a, axis)
    n = a.values.size if axis is None else a.shape[axis]
    return _record("reduce_mean", (a,), np.mean(a.values, axis=axis, keepdims=keepdims),
                   axis=axis, keepdims=keepdims, n=n)


def _reduce_mean_bw(g, e):
    return (_expand_reduced(g, e) / e.ctx["n"],)


def reduce_var(a, axis: int | None = None, keepdims: bool = False, biased: bool = True) -> Tensor:
    """Variance along ``axis``; ``biased`` divides by n, otherwise by n - 1."""
    a = as_tensor(a)
    _check_axis("reduce_var", a, axis)
    n = a.values.size if axis is None else a.shape[axis]
    ddof = 0 if biased else 1
    if n - ddof <= 0:
        raise ShapeError(f"reduce_var: need more than {ddof} element(s) along axis, shape {a.shape}")
    return _record("reduce_var", (a,), np.var(a.values, axis=axis, keepdims=keepdims, ddof=ddof),
                   axis=axis, keepdims=keepdims, n=n, ddof=ddof)


def _reduce_var_bw(g, e):
    a = e.inputs[0]
    axis = e.ctx["axis"]
    centered = a.values - np.mean(a.values, axis=axis, keepdims=True)
    return (_expand_reduced(g, e) * 2.0 * centered / (e.ctx["n"] - e.ctx["ddof"]),)


def broadcast(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.values, shape).copy()
    except ValueError:
        raise ShapeError(f"broadcast: cannot broadcast {a.shape} to {shape}") from None
    return _record("broadcast", (a,), out)


def _broadcast_bw(g, e):
    return (_unbroadcast(g, e.inputs[0].shape),)


def slice_(a, index) -> Tensor:
    """Basic or integer-array indexing; gradient scatters back with accumulation."""
    a = as_tensor(a)
    try:
        out = np.array(a.values[index])
    except IndexError as err:
        raise ShapeError(f"slice: {err} (shape {a.shape})") from None
    return _record("slice", (a,), out, index=index)


def _slice_bw(g, e):
    grad = np.zeros_like(e.inputs[0].values)
    np.add.at(grad, e.ctx["index"], g)
    return (grad,)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.values for t in tensors], axis=axis)
    except ValueError:
        shapes = ", ".join(str(t.shape) for t in tensors)
        raise ShapeError(f"concat: incompatible shapes {shapes} along axis {axis}") from None
    sizes = [t.shape[axis] for t in tensors]
    return _record("concat", tuple(tensors), out, axis=axis, sizes=sizes)


def _concat_bw(g, e):
    splits = np.cumsum(e.ctx["sizes"])[:-1]
    return tuple(np.split(g, splits, axis=e.ctx["axis"]))


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"transpose: expected a matrix, got shape {a.shape}")
    return _record("transpose", (a,), a.values.T.copy())


def _transpose_bw(g, e):
    return (g.T,)


def max_index_stopgrad(a, axis: int = -1) -> np.ndarray:
    """Index of the maximum along ``axis``; ties go to the lowest index.

    Returns a plain integer array: no gradient flows through the choice.
    """
    return np.argmax(as_tensor(a).values, axis=axis)


RULES.update(
    matmul=_matmul_bw,
    add=_add_bw,
    subtract=_subtract_bw,
    elementwise_multiply=_multiply_bw,
    scalar_scale=_scalar_scale_bw,
    tanh=_tanh_bw,
    relu=_relu_bw,
    log=_log_bw,
    exp=_exp_bw,
    reduce_sum=_reduce_sum_bw,
    reduce_mean=_reduce_mean_bw,
    reduce_var=_reduce_var_bw,
    broadcast=_broadcast_bw,
    slice=_slice_bw,
    concat=_concat_bw,
    transpose=_transpose_bw,
)


# ------------------------------------------------------------------ backward


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Populate ``.grad`` on every requires_grad leaf recorded on ``loss``'s tape.

    Returns a mapping leaf -> gradient. Leaves on the tape that ``loss`` does not
    depend on receive zeros. Gradients of a tensor used several times accumulate.
    """
    if loss.values.size != 1 or loss.ndim != 0:
        raise ValueError(f"backward: loss must be a scalar, got shape {loss.shape}")
    tape = loss._tape
    if tape is None:
        if loss.requires_grad and not loss._derived:
            loss.grad = np.array(1.0)
            return {loss: loss.grad}
        raise ValueError("backward: loss was not computed under an active Tape")

    grads: dict[int, np.ndarray] = {id(loss): np.array(1.0)}
    for entry in reversed(tape.entries):
        g = grads.pop(id(entry.output), None)
        if g is None:
            continue
        in_grads = RULES[entry.op](g, entry)
        for t, gi in zip(entry.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = np.array(gi, dtype=np.float64)

    result = {}
    for leaf in tape.leaves():
        g = grads.get(id(leaf))
        leaf.grad = np.zeros_like(leaf.values) if g is None else g.reshape(leaf.shape)
        result[leaf] = leaf.grad
    return result


def finite_difference_check(function: Callable[[Tensor], Tensor], point, eps: float = 1e-6,
                            zero_floor: float | None = None) -> float:
    """Max relative error between tape gradients and central differences.

    Coordinate error is ``|a - n| / max(1e-12, |a| + |n|)``. Coordinates where
    ``|a| + |n|`` is below ``zero_floor`` are compared by absolute difference:
    there the central difference is dominated by round-off, whose size is
    about ``eps_mach * |f| / eps``. The default floor is ``1e5`` times that
    level, which keeps the relative metric meaningful at a 1e-5 tolerance.
    """
    x0 = np.array(as_tensor(point).values, dtype=np.float64)
    x = Tensor(x0.copy(), requires_grad=True)
    with Tape():
        out = function(x)
    backward(out)
    analytic = x.grad.copy()
    if zero_floor is None:
        zero_floor = 1e5 * np.finfo(np.float64).eps * max(1.0, abs(out.item())) / eps

    numeric = np.zeros_like(x0)
    flat = numeric.reshape(-1)
    for i in range(x0.size):
        xp = x0.copy().reshape(-1)
        xm = x0.copy().reshape(-1)
        xp[i] += eps
        xm[i] -= eps
        fp = function(Tensor(xp.reshape(x0.shape))).item()
        fm = function(Tensor(xm.reshape(x0.shape))).item()
        flat[i] = (fp - fm) / (2.0 * eps)

    diff = np.abs(analytic - numeric)
    scale = np.abs(analytic) + np.abs(numeric)
    rel = diff / np.maximum(1e-12, scale)
    err = np.where(scale < zero_floor, diff, rel)
    return float(err.max()) if err.size else 0.0
