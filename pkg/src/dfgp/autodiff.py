"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every primitive checks operand shapes (no broadcasting) and refuses to
produce non-finite values. Operations on tensors that require gradients
are recorded on the innermost active :class:`Tape`; ``backward`` replays
that tape in reverse recording order.
"""

from __future__ import annotations

import contextlib
import math
from collections.abc import Callable, Sequence

import numpy as np

from .errors import NumericError, ShapeError, TapeError

__all__ = [
    "Tensor",
    "Tape",
    "current_tape",
    "no_grad",
    "backward",
    "custom_gradient",
    "finite_difference_gradient",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "scale",
    "matmul",
    "tanh",
    "sigmoid",
    "exp",
    "log",
    "softplus",
    "sum",
    "mean",
    "slice",
    "concat",
    "transpose",
    "reshape",
    "tile",
]


class Tensor:
    """A dense row-major float64 array that may take part in differentiation.

    Parameters
    ----------
    data : array_like
        Values; copied into a contiguous float64 buffer.
    requires_grad : bool
        Leaves with this flag accumulate ``grad`` during ``backward``.
    name : str, optional
        Label used in error messages and checkpoints.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "_tape", "_leaf")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64, copy=True, order="C")
        if not np.all(np.isfinite(arr)):
            raise NumericError(f"non-finite value in tensor {name or ''}".rstrip())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._tape: Tape | None = None
        self._leaf = True

    @classmethod
    def _from_op(cls, arr: np.ndarray, op: str) -> Tensor:
        if not np.all(np.isfinite(arr)):
            raise NumericError(f"{op} produced a non-finite value")
        t = cls.__new__(cls)
        t.data = np.asarray(arr, dtype=np.float64, order="C")
        t.requires_grad = False
        t.grad = None
        t.name = None
        t._tape = None
        t._leaf = False
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._leaf

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single value, shape is {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> Tensor:
        return Tensor(self.data, requires_grad=False, name=self.name)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, retain: bool = False) -> None:
        backward(self, retain=retain)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, _as_tensor(other, self))

    def __radd__(self, other):
        return add(_as_tensor(other, self), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self))

    def __rsub__(self, other):
        return sub(_as_tensor(other, self), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(other, self)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / other)
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice(self, index)

    @property
    def T(self) -> Tensor:
        return transpose(self)


def _as_tensor(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    if isinstance(value, (int, float)):
        return Tensor(np.full(like.shape, float(value)))
    return Tensor(value)


class _Node:
    __slots__ = ("inputs", "output", "rule", "op")

    def __init__(self, inputs, output, rule, op):
        self.inputs = inputs
        self.output = output
        self.rule = rule
        self.op = op


class Tape:
    """Ordered record of the differentiable operations of one computation.

    Use as a context manager to make it the recording target::

        with Tape() as tape:
            loss = model_loss(params)
        tape.backward(loss)
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> Tape:
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc) -> None:
        top = _TAPE_STACK.pop()
        assert top is self, "tapes must be exited in LIFO order"

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, inputs: tuple[Tensor, ...], output: Tensor, rule, op: str) -> None:
        output.requires_grad = True
        output._tape = self
        self.nodes.append(_Node(inputs, output, rule, op))

    def clear(self) -> None:
        for node in self.nodes:
            node.output._tape = None
        self.nodes = []

    def backward(self, loss: Tensor, retain: bool = False) -> None:
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss._leaf:
            if not loss.requires_grad:
                raise TapeError("loss does not require gradients")
            _accumulate(loss, np.ones_like(loss.data))
            return
        if loss._tape is not self:
            raise TapeError("loss was not recorded on this tape")

        pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g_out = pending.pop(id(node.output), None)
            if g_out is None:
                continue
            in_grads = node.rule(g_out)
            for inp, g in zip(node.inputs, in_grads):
                if g is None or not inp.requires_grad:
                    continue
                if g.shape != inp.shape:
                    raise ShapeError(
                        f"{node.op}: gradient shape {g.shape} does not match input {inp.shape}"
                    )
                if inp._leaf:
                    _accumulate(inp, g)
                else:
                    key = id(inp)
                    prev = pending.get(key)
                    pending[key] = g if prev is None else prev + g
        if not retain:
            self.clear()


def _accumulate(leaf: Tensor, g: np.ndarray) -> None:
    if leaf.grad is None:
        leaf.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        leaf.grad = leaf.grad + g


_DEFAULT_TAPE = Tape()
_TAPE_STACK: list[Tape] = []


_GRAD_ENABLED = [True]


def current_tape() -> Tape:
    return _TAPE_STACK[-1] if _TAPE_STACK else _DEFAULT_TAPE


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording anything, even for ``requires_grad`` inputs."""
    _GRAD_ENABLED.append(False)
    try:
        yield
    finally:
        _GRAD_ENABLED.pop()


def backward(loss: Tensor, retain: bool = False) -> None:
    """Populate ``grad`` on every leaf that ``loss`` depends on.

    The tape that recorded ``loss`` is cleared afterwards unless ``retain``.
    """
    if not isinstance(loss, Tensor):
        raise TapeError("backward expects a Tensor")
    if loss._leaf:
        Tape().backward(loss)
        return
    tape = loss._tape
    if tape is None:
        raise TapeError("loss is detached from any tape")
    tape.backward(loss, retain=retain)


def _emit(op: str, inputs: tuple[Tensor, ...], value: np.ndarray, rule) -> Tensor:
    out = Tensor._from_op(value, op)
    if _GRAD_ENABLED[-1] and any(t.requires_grad for t in inputs):
        current_tape().record(inputs, out, rule, op)
    return out


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


def custom_gradient(
    value,
    inputs: Sequence[Tensor],
    rule: Callable[[np.ndarray], Sequence[np.ndarray | None]],
    op: str = "custom",
) -> Tensor:
    """Wrap a precomputed value as a tape node with a hand-written gradient.

    ``rule(g_out)`` must return one gradient (or None) per input, each
    shaped like that input.
    """
    inputs = tuple(inputs)

    def checked(g):
        grads = tuple(rule(g))
        if len(grads) != len(inputs):
            raise ShapeError(f"{op}: rule returned {len(grads)} gradients for {len(inputs)} inputs")
        out = []
        for inp, gi in zip(inputs, grads):
            if gi is None:
                out.append(None)
                continue
            gi = np.asarray(gi, dtype=np.float64)
            if gi.shape != inp.shape:
                raise ShapeError(f"{op}: gradient shape {gi.shape} does not match input {inp.shape}")
            out.append(gi)
        return out

    return _emit(op, inputs, np.asarray(value, dtype=np.float64), checked)


# ---------------------------------------------------------------- primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _emit("add", (a, b), a.data + b.data, lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _emit("sub", (a, b), a.data - b.data, lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    return _emit("mul", (a, b), a.data * b.data, lambda g: (g * b.data, g * a.data))


def div(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("div", a, b)
    if np.any(b.data == 0.0):
        raise NumericError("div: division by zero")
    q = a.data / b.data
    return _emit("div", (a, b), q, lambda g: (g / b.data, -g * q / b.data))


def neg(a: Tensor) -> Tensor:
    return _emit("neg", (a,), -a.data, lambda g: (-g,))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _emit("scale", (a,), c * a.data, lambda g: (c * g,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul: needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    return _emit(
        "matmul", (a, b), a.data @ b.data, lambda g: (g @ b.data.T, a.data.T @ g)
    )


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _emit("tanh", (a,), y, lambda g: (g * (1.0 - y * y),))


def sigmoid(a: Tensor) -> Tensor:
    y = 0.5 * (np.tanh(0.5 * a.data) + 1.0)
    return _emit("sigmoid", (a,), y, lambda g: (g * y * (1.0 - y),))


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        y = np.exp(a.data)
    return _emit("exp", (a,), y, lambda g: (g * y,))


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0.0):
        raise NumericError("log: non-positive argument")
    return _emit("log", (a,), np.log(a.data), lambda g: (g / a.data,))


def softplus(a: Tensor) -> Tensor:
    y = np.logaddexp(0.0, a.data)
    return _emit(
        "softplus", (a,), y, lambda g: (g * 0.5 * (np.tanh(0.5 * a.data) + 1.0),)
    )


def sum(a: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001
    if axis is None:
        return _emit(
            "sum", (a,), np.array(a.data.sum()), lambda g: (np.full(a.shape, float(g)),)
        )
    y = a.data.sum(axis=axis)
    return _emit(
        "sum",
        (a,),
        y,
        lambda g: (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),),
    )


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    if n == 0:
        raise ShapeError("mean of an empty tensor")
    return scale(sum(a, axis=axis), 1.0 / n)


_SLICE = type(np.s_[:])


def _basic(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, np.integer, _SLICE)) or i is Ellipsis for i in items)


def slice(a: Tensor, index) -> Tensor:  # noqa: A001
    """Select ``a.data[index]``; integer-array indices gather (rows may repeat)."""
    try:
        y = a.data[index]
    except IndexError as exc:
        raise ShapeError(f"slice: {exc}") from None
    basic = _basic(index)

    def rule(g):
        full = np.zeros(a.shape)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _emit("slice", (a,), np.array(y, copy=True), rule)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise ShapeError("concat: nothing to concatenate")
    ref = tensors[0].shape
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(
            s != r for k, (s, r) in enumerate(zip(t.shape, ref)) if k != axis % len(ref)
        ):
            raise ShapeError(f"concat: incompatible shapes {ref} and {t.shape}")
    y = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _emit("concat", tensors, y, lambda g: tuple(np.split(g, bounds, axis=axis)))


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose: needs a 2-D tensor, got {a.shape}")
    return _emit("transpose", (a,), a.data.T, lambda g: (g.T,))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    if math.prod(shape) != a.data.size:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}")
    return _emit("reshape", (a,), a.data.reshape(shape), lambda g: (g.reshape(a.shape),))


def tile(a: Tensor, reps: Sequence[int]) -> Tensor:
    """Explicit replication; the stand-in for broadcasting."""
    reps = tuple(reps)
    if len(reps) != a.data.ndim:
        raise ShapeError(f"tile: {len(reps)} repeats for a {a.data.ndim}-D tensor")
    y = np.tile(a.data, reps)

    def rule(g):
        split = []
        for r, s in zip(reps, a.shape):
            split.extend((r, s))
        return (g.reshape(split).sum(axis=tuple(range(0, 2 * len(reps), 2))),)

    return _emit("tile", (a,), y, rule)


# ---------------------------------------------------------------- oracle


def finite_difference_gradient(
    f: Callable[[Tensor], Tensor | float], x, h: float = 1e-5
) -> np.ndarray:
    """Central-difference gradient of a scalar function, one coordinate at a time."""
    if h <= 0:
        raise ValueError("step h must be positive")
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)

    def evaluate(v):
        with no_grad():
            out = f(Tensor(v.reshape(base.shape)))
        val = out.item() if isinstance(out, Tensor) else float(out)
        if not math.isfinite(val):
            raise NumericError("finite differences: non-finite function value")
        return val

    for j in range(flat.size):
        probe = flat.copy()
        probe[j] = flat[j] + h
        fp = evaluate(probe)
        probe[j] = flat[j] - h
        fm = evaluate(probe)
        gflat[j] = (fp - fm) / (2.0 * h)
    return grad
