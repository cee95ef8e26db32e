"""Dense float64 tensors with a reverse-mode gradient tape.

Operations executed inside ``with Tape() as tape:`` are recorded together with a
local-gradient rule; :func:`backward` walks the record in reverse and sums
gradients wherever a tensor fans out into several operations.  Outside a tape
the same functions simply compute values.
"""

from __future__ import annotations

import logging
import threading
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from weightshare.errors import ShapeError, WeightShareError

logger = logging.getLogger(__name__)

_local = threading.local()

ArrayLike = np.ndarray | float | int | Sequence
Initializer = Callable[[np.random.Generator, tuple[int, ...]], np.ndarray]


class Tensor:
    """A dense real array that may take part in gradient recording."""

    __slots__ = ("values", "requires_grad", "grad", "name")

    def __init__(self, values: ArrayLike, requires_grad: bool = False, name: str | None = None):
        self.values = np.asarray(values, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    def item(self) -> float:
        if self.values.size != 1:
            raise ShapeError(f"item() needs a single value, got shape {self.shape}")
        return float(self.values.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.values

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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"


def as_tensor(value: Tensor | ArrayLike) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


@dataclass(eq=False)
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], tuple[np.ndarray | None, ...]]


class Tape:
    """Ordered record of the primitive operations of one forward pass.

    A tape belongs to the thread that opened it.
    """

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self) -> "Tape":
        stack = _tape_stack()
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def record(self, node: Node) -> None:
        self.nodes.append(node)

    def __len__(self) -> int:
        return len(self.nodes)


def _tape_stack() -> list[Tape]:
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


def active_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


def _emit(op: str, inputs: tuple[Tensor, ...], values: np.ndarray, rule) -> Tensor:
    out = Tensor(values, requires_grad=any(t.requires_grad for t in inputs))
    tape = active_tape()
    if tape is not None and out.requires_grad:
        tape.record(Node(op, inputs, out, rule))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_check(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# -- primitives -----------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("add", a, b)

    def rule(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _emit("add", (a, b), a.values + b.values, rule)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("sub", a, b)

    def rule(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _emit("sub", (a, b), a.values - b.values, rule)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("mul", a, b)

    def rule(g):
        return _unbroadcast(g * b.values, a.shape), _unbroadcast(g * a.values, b.shape)

    return _emit("mul", (a, b), a.values * b.values, rule)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("div", a, b)

    def rule(g):
        return (
            _unbroadcast(g / b.values, a.shape),
            _unbroadcast(-g * a.values / (b.values * b.values), b.shape),
        )

    return _emit("div", (a, b), a.values / b.values, rule)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def rule(g):
        return g @ b.values.T, a.values.T @ g

    return _emit("matmul", (a, b), a.values @ b.values, rule)


def max_(x, axis: int) -> Tensor:
    """Reduce by maximum along ``axis``; the gradient goes to the first maximal element."""
    x = as_tensor(x)
    if x.shape[axis] < 1:
        raise ShapeError(f"max: empty axis {axis} in shape {x.shape}")
    winners = np.expand_dims(np.argmax(x.values, axis=axis), axis)

    def rule(g):
        gx = np.zeros_like(x.values)
        np.put_along_axis(gx, winners, np.expand_dims(g, axis), axis=axis)
        return (gx,)

    return _emit("max", (x,), np.take_along_axis(x.values, winners, axis=axis).squeeze(axis), rule)


def abs_(x) -> Tensor:
    x = as_tensor(x)

    def rule(g):
        return (g * np.sign(x.values),)

    return _emit("abs", (x,), np.abs(x.values), rule)


def sqrt(x) -> Tensor:
    x = as_tensor(x)
    root = np.sqrt(x.values)

    def rule(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            return (g * 0.5 / root,)

    return _emit("sqrt", (x,), root, rule)


def _expand_reduced(g: np.ndarray, shape: tuple[int, ...], axis, keepdims: bool) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g, shape)
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    if not keepdims:
        for ax in sorted(a % len(shape) for a in axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def sum_(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)

    def rule(g):
        return (np.array(_expand_reduced(g, x.shape, axis, keepdims)),)

    return _emit("sum", (x,), np.sum(x.values, axis=axis, keepdims=keepdims), rule)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = np.mean(x.values, axis=axis, keepdims=keepdims)
    count = x.values.size // max(np.size(out), 1)

    def rule(g):
        return (np.array(_expand_reduced(g, x.shape, axis, keepdims)) / count,)

    return _emit("mean", (x,), out, rule)


def slice_(x, index) -> Tensor:
    x = as_tensor(x)

    def rule(g):
        gx = np.zeros_like(x.values)
        np.add.at(gx, index, g)
        return (gx,)

    return _emit("slice", (x,), np.array(x.values[index]), rule)


def pad(x, pad_width: Sequence[tuple[int, int]], value: float = 0.0) -> Tensor:
    x = as_tensor(x)
    if len(pad_width) != x.ndim:
        raise ShapeError(f"pad: {len(pad_width)} pad specs for shape {x.shape}")
    interior = tuple(slice(lo, lo + n) for (lo, _), n in zip(pad_width, x.shape))

    def rule(g):
        return (g[interior],)

    return _emit("pad", (x,), np.pad(x.values, pad_width, constant_values=value), rule)


def reshape(x, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.values.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view shape {x.shape} as {tuple(shape)}") from None

    def rule(g):
        return (g.reshape(x.shape),)

    return _emit("reshape", (x,), out, rule)


def transpose(x, axes: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    inverse = np.argsort(axes)

    def rule(g):
        return (np.transpose(g, inverse),)

    return _emit("transpose", (x,), np.transpose(x.values, axes), rule)


def relu(x) -> Tensor:
    x = as_tensor(x)
    active = x.values > 0

    def rule(g):
        return (g * active,)

    return _emit("relu", (x,), np.where(active, x.values, 0.0), rule)


def unfold1d(x, size: int) -> Tensor:
    """Sliding windows along axis 1: (B, L, C) -> (B, L - size + 1, size, C)."""
    x = as_tensor(x)
    if x.ndim != 3 or x.shape[1] < size:
        raise ShapeError(f"unfold1d: window {size} does not fit shape {x.shape}")
    n_out = x.shape[1] - size + 1
    windows = np.lib.stride_tricks.sliding_window_view(x.values, size, axis=1)
    out = np.ascontiguousarray(np.moveaxis(windows, 3, 2))

    def rule(g):
        gx = np.zeros_like(x.values)
        for k in range(size):
            gx[:, k : k + n_out, :] += g[:, :, k, :]
        return (gx,)

    return _emit("unfold1d", (x,), out, rule)


PRIMITIVES: dict[str, Callable[..., Tensor]] = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "matmul": matmul,
    "max": max_,
    "abs": abs_,
    "sqrt": sqrt,
    "sum": sum_,
    "mean": mean,
    "slice": slice_,
    "pad": pad,
    "reshape": reshape,
    "transpose": transpose,
    "relu": relu,
    "unfold1d": unfold1d,
}


def forward_primitive(op_kind: str, *inputs, **options) -> Tensor:
    try:
        op = PRIMITIVES[op_kind]
    except KeyError:
        raise WeightShareError(f"unknown primitive {op_kind!r}") from None
    return op(*inputs, **options)


# -- parameters -----------------------------------------------------------------


@dataclass(eq=False)
class Parameter:
    """A named trainable tensor.  Networks share a parameter by holding the same object."""

    id: str
    tensor: Tensor
    trainable: bool = True

    @property
    def values(self) -> np.ndarray:
        return self.tensor.values

    @property
    def shape(self) -> tuple[int, ...]:
        return self.tensor.shape


class ParameterRegistry:
    """Owns every parameter and non-trainable buffer of one experiment."""

    def __init__(self, seed: int = 0):
        self.seed = seed
        self.rng = np.random.default_rng(seed)
        self._params: dict[str, Parameter] = {}
        self._buffers: dict[str, np.ndarray] = {}

    def get_or_create(self, pid: str, shape: tuple[int, ...], init: Initializer) -> Parameter:
        shape = tuple(int(s) for s in shape)
        existing = self._params.get(pid)
        if existing is not None:
            if existing.shape != shape:
                raise ShapeError(f"parameter {pid!r} exists with shape {existing.shape}, requested {shape}")
            return existing
        return self.create(pid, shape, init)

    def create(self, pid: str, shape: tuple[int, ...], init: Initializer) -> Parameter:
        if pid in self._params:
            raise WeightShareError(f"parameter {pid!r} is already registered")
        values = np.array(init(self.rng, tuple(shape)), dtype=np.float64)
        param = Parameter(pid, Tensor(values, requires_grad=True, name=pid))
        self._params[pid] = param
        return param

    def buffer(self, bid: str, initial: np.ndarray) -> np.ndarray:
        if bid not in self._buffers:
            self._buffers[bid] = np.array(initial, dtype=np.float64)
        return self._buffers[bid]

    def __getitem__(self, pid: str) -> Parameter:
        return self._params[pid]

    def __contains__(self, pid: str) -> bool:
        return pid in self._params

    def __iter__(self):
        return iter(self._params.values())

    def __len__(self) -> int:
        return len(self._params)

    def parameters(self, prefix: str | None = None) -> list[Parameter]:
        return [p for pid, p in self._params.items() if prefix is None or pid.startswith(prefix)]

    @property
    def buffers(self) -> dict[str, np.ndarray]:
        return self._buffers

    def parameter_values(self) -> dict[str, np.ndarray]:
        return {pid: p.values.copy() for pid, p in self._params.items()}

    def buffer_values(self) -> dict[str, np.ndarray]:
        return {bid: b.copy() for bid, b in self._buffers.items()}

    def assign(self, values: Mapping[str, np.ndarray], buffers: Mapping[str, np.ndarray] | None = None) -> None:
        """Overwrite parameter and buffer values in place, keeping identities."""
        for pid, value in values.items():
            param = self._params.get(pid)
            if param is None:
                continue
            if param.shape != np.shape(value):
                raise ShapeError(f"assign {pid!r}: shape {np.shape(value)} != {param.shape}")
            param.values[...] = value
        for bid, value in (buffers or {}).items():
            if bid in self._buffers:
                self._buffers[bid][...] = value


# -- gradients ------------------------------------------------------------------


def backward(
    tape: Tape, loss: Tensor, parameters: Iterable[Parameter] | None = None
) -> dict[str, np.ndarray]:
    """Propagate d(loss) back through ``tape``.

    Sets ``grad`` on every reached tensor that requires gradients and returns a map
    from parameter id to gradient.  With ``parameters`` given, the map holds exactly
    the trainable ones among them (zeros where unreachable); otherwise it holds every
    reached named tensor.
    """
    if loss.values.shape != ():
        raise ShapeError(f"backward: loss must be a scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones(())}
    reached: dict[int, Tensor] = {id(loss): loss}
    for node in reversed(tape.nodes):
        g = grads.get(id(node.output))
        if g is None:
            continue
        for tensor, local in zip(node.inputs, node.backward(g)):
            if local is None or not tensor.requires_grad:
                continue
            key = id(tensor)
            grads[key] = grads[key] + local if key in grads else np.array(local, dtype=np.float64)
            reached[key] = tensor

    for key, tensor in reached.items():
        if tensor.requires_grad:
            tensor.grad = grads[key]

    if parameters is None:
        return {t.name: grads[k] for k, t in reached.items() if t.name is not None and t.requires_grad}
    return {
        p.id: grads.get(id(p.tensor), np.zeros_like(p.values))
        for p in parameters
        if p.trainable
    }


def grad_check(function: Callable[[Tensor], Tensor], point: ArrayLike, step: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    The error per coordinate is ``|analytic - numeric| / max(1, |numeric|)``.
    """
    base = np.array(point, dtype=np.float64)
    x = Tensor(base.copy(), requires_grad=True)
    with Tape() as tape:
        out = function(x)
    backward(tape, out)
    analytic = x.grad if x.grad is not None else np.zeros_like(base)

    numeric = np.zeros_like(base)
    for i in range(base.size):
        shifted = base.copy()
        shifted.flat[i] += step
        upper = function(Tensor(shifted)).item()
        shifted.flat[i] -= 2 * step
        lower = function(Tensor(shifted)).item()
        numeric.flat[i] = (upper - lower) / (2 * step)
    if base.size == 0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))))


def check_parameter_gradients(
    loss_fn: Callable[[], Tensor], parameters: Sequence[Parameter], step: float = 1e-5
) -> float:
    """grad_check over parameters held in place; ``loss_fn`` must be repeatable."""
    with Tape() as tape:
        loss = loss_fn()
    analytic = backward(tape, loss, parameters)
    worst = 0.0
    for param in parameters:
        if not param.trainable:
            continue
        flat = param.values.reshape(-1)
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + step
            upper = loss_fn().item()
            flat[i] = original - step
            lower = loss_fn().item()
            flat[i] = original
            numeric = (upper - lower) / (2 * step)
            err = abs(analytic[param.id].reshape(-1)[i] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    return worst
