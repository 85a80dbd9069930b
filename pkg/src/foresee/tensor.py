"""Dense tensors with tape-based reverse-mode differentiation.

Operations executed while a :class:`Tape` is active are recorded in order;
``Tape.backward`` replays their adjoints in exact reverse order. Outside of a
tape nothing is recorded, so inference never pays for graph bookkeeping.

    >>> from foresee import tensor as ft
    >>> x = ft.Tensor([3.0], requires_grad=True, dtype=np.float64)
    >>> with ft.Tape() as tape:
    ...     tape.backward(ft.sum(x * x))
    >>> float(x.grad[0])
    6.0
"""
from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Sequence

import numpy as np

from .errors import ContractError, DimensionError

_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """A dense row-major array, optionally tracked for gradients.

    ``grad`` is ``None`` unless ``requires_grad`` is set, in which case it is a
    zero-initialised buffer of the same shape. Only leaves (tensors not
    produced on the tape) receive gradients; they accumulate across backward
    passes until :meth:`zero_grad` is called.
    """

    __slots__ = ("data", "requires_grad", "_grad", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if dtype is None:
            if isinstance(data, np.ndarray) and np.issubdtype(data.dtype, np.floating):
                dtype = data.dtype
            else:
                dtype = np.float32
        self.data = np.array(data, dtype=dtype)
        self.requires_grad = requires_grad
        self._grad = None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t._grad = None
        t.name = None
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

    @property
    def grad(self) -> np.ndarray | None:
        if not self.requires_grad:
            return None
        if self._grad is None:
            self._grad = np.zeros_like(self.data)
        return self._grad

    @grad.setter
    def grad(self, value):
        if value is None:
            self._grad = None
            return
        value = np.asarray(value, dtype=self.data.dtype)
        if value.shape != self.data.shape:
            raise DimensionError(f"grad shape {value.shape} does not match tensor shape {self.data.shape}")
        self._grad = value

    def zero_grad(self) -> None:
        if self._grad is not None:
            self._grad.fill(0)

    def _accumulate(self, g: np.ndarray) -> None:
        if self._grad is None:
            self._grad = np.array(g, dtype=self.data.dtype, copy=True).reshape(self.data.shape)
        else:
            self._grad += g

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"tensor of shape {self.shape} is not a scalar")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def astype(self, dtype) -> "Tensor":
        t = Tensor(self.data, requires_grad=self.requires_grad, dtype=dtype, name=self.name)
        return t

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return shift(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return shift(self, -other)

    def __rsub__(self, other):
        return shift(scale(self, -1.0), other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)


class _Outer(NamedTuple):
    """Deferred adjoint ``outer(left, right)``."""

    left: np.ndarray
    right: np.ndarray


class _Node(NamedTuple):
    out: Tensor
    inputs: tuple
    backward: Callable


class Tape:
    """Ordered record of executed operations.

    Use as a context manager; leaving the block clears the tape, so call
    :meth:`backward` inside it.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._position: dict[int, int] = {}

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        else:
            stack.remove(self)
        self.clear()

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, out: Tensor, inputs: tuple, backward: Callable) -> None:
        self._position[id(out)] = len(self.nodes)
        self.nodes.append(_Node(out, inputs, backward))

    def clear(self) -> None:
        self.nodes = []
        self._position = {}

    def backward(self, loss: Tensor) -> None:
        if loss.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        end = self._position.get(id(loss))
        if end is None or self.nodes[end].out is not loss:
            raise ContractError("loss was not produced on this tape")
        produced = self._position
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        # outer-product adjoints of leaves are summed as one matmul at the end
        pending: dict[int, tuple[Tensor, list, list]] = {}
        for node in reversed(self.nodes[: end + 1]):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            for t, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                if key not in produced:
                    if isinstance(gi, _Outer):
                        entry = pending.setdefault(key, (t, [], []))
                        entry[1].append(gi.left)
                        entry[2].append(gi.right)
                    else:
                        t._accumulate(gi)
                    continue
                if isinstance(gi, _Outer):
                    gi = np.outer(gi.left, gi.right)
                grads[key] = grads[key] + gi if key in grads else gi
        for t, lefts, rights in pending.values():
            t._accumulate(np.stack(lefts).T @ np.stack(rights))


def backward(loss: Tensor) -> None:
    """Run backward on whichever active tape recorded ``loss``."""
    for tape in reversed(_tape_stack()):
        if id(loss) in tape._position:
            tape.backward(loss)
            return
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    raise ContractError("loss is not on an active tape")


def record(out_data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Wrap ``out_data`` as the result of an operation on ``inputs``.

    ``backward_fn(g)`` must return one gradient (or ``None``) per input. This is
    the extension point for custom operations.
    """
    out = Tensor._wrap(out_data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(out, tuple(inputs), backward_fn)
    return out


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _same_shape(name: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{name}: shapes {a.shape} and {b.shape} differ")


# -- linear algebra ---------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product supporting 1-D operands as row/column vectors."""
    if a.ndim not in (1, 2) or b.ndim not in (1, 2) or a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    A, B = a.data, b.data

    def back(g):
        ga = gb = None
        if A.ndim == 1 and B.ndim == 1:
            return g * B, g * A
        if a.requires_grad:
            ga = np.outer(g, B) if B.ndim == 1 else g @ B.T
        if b.requires_grad:
            gb = _Outer(A, g) if A.ndim == 1 else A.T @ g
        return ga, gb

    return record(A @ B, (a, b), back)


# -- elementwise ------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return record(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return record(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    A, B = a.data, b.data
    return record(A * B, (a, b), lambda g: (g * B, g * A))


def scale(x: Tensor, c: float) -> Tensor:
    c = x.data.dtype.type(c)
    return record(x.data * c, (x,), lambda g: (g * c,))


def shift(x: Tensor, c: float) -> Tensor:
    c = x.data.dtype.type(c)
    return record(x.data + c, (x,), lambda g: (g,))


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """``x + b`` with a 1-D bias broadcast over the rows of ``x``."""
    if b.ndim != 1 or x.ndim not in (1, 2) or x.shape[-1] != b.shape[0]:
        raise DimensionError(f"add_bias: cannot add bias {b.shape} to {x.shape}")
    if x.ndim == 1:
        return record(x.data + b.data, (x, b), lambda g: (g, g))
    return record(x.data + b.data, (x, b), lambda g: (g, g.sum(axis=0)))


def sigmoid(x: Tensor) -> Tensor:
    # exp(-log(1 + e^-x)) never overflows
    s = np.exp(-np.logaddexp(0.0, -x.data)).astype(x.dtype, copy=False)
    return record(s, (x,), lambda g: (g * s * (1 - s),))


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)
    return record(t, (x,), lambda g: (g * (1 - t * t),))


def exp(x: Tensor) -> Tensor:
    e = np.exp(x.data)
    return record(e, (x,), lambda g: (g * e,))


def clamp(x: Tensor, lo: float = 0.0, hi: float = 1.0) -> Tensor:
    """Clip to ``[lo, hi]``; gradient passes only where ``x`` was in range."""
    X = x.data
    mask = (X >= lo) & (X <= hi)
    return record(np.clip(X, lo, hi), (x,), lambda g: (g * mask,))


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "scale": scale,
    "affine_bias": add_bias,
    "exp": exp,
    "clamp": clamp,
}


def elementwise(op: str, *args):
    """Dispatch an elementwise operation by name."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ContractError(f"unknown elementwise op {op!r}") from None
    return fn(*args)


# -- reductions and normalisation ------------------------------------------

def softmax(v: Tensor) -> Tensor:
    if v.ndim != 1 or v.shape[0] == 0:
        raise DimensionError(f"softmax needs a non-empty vector, got shape {v.shape}")
    e = np.exp(v.data - v.data.max())
    s = e / e.sum()
    return record(s, (v,), lambda g: (s * (g - np.dot(g, s)),))


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = x.shape
    return record(np.asarray(x.data.sum(), dtype=x.dtype), (x,), lambda g: (np.broadcast_to(g, shape),))


def mean(x: Tensor) -> Tensor:
    shape, n = x.shape, x.size
    return record(np.asarray(x.data.mean(), dtype=x.dtype), (x,),
                  lambda g: (np.broadcast_to(g / n, shape),))


# -- shape manipulation -----------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return record(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def take(x: Tensor, index) -> Tensor:
    """Basic (int/slice) indexing."""
    shape, dtype = x.shape, x.dtype

    def back(g):
        full = np.zeros(shape, dtype=dtype)
        full[index] = g
        return (full,)

    return record(x.data[index], (x,), back)


def stack(rows: Sequence[Tensor]) -> Tensor:
    """Stack equally-shaped tensors along a new leading axis."""
    if not rows:
        raise DimensionError("stack needs at least one tensor")
    shape = rows[0].shape
    for r in rows:
        if r.shape != shape:
            raise DimensionError(f"stack: shapes {shape} and {r.shape} differ")
    n = len(rows)
    return record(np.stack([r.data for r in rows]), tuple(rows), lambda g: tuple(g[i] for i in range(n)))


def concat(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate along the leading axis."""
    if not parts:
        raise DimensionError("concat needs at least one tensor")
    tail = parts[0].shape[1:]
    for p in parts:
        if p.shape[1:] != tail:
            raise DimensionError(f"concat: trailing shapes {tail} and {p.shape[1:]} differ")
    bounds = np.cumsum([0] + [p.shape[0] for p in parts])
    return record(np.concatenate([p.data for p in parts]), tuple(parts),
                  lambda g: tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(parts))))


# -- gradient checking ------------------------------------------------------

@dataclass
class GradCheckReport:
    """Per-input maximum relative error between tape and finite differences."""

    max_rel_error: list[float]
    tolerance: float
    worst_index: list[tuple] = field(default_factory=list)

    @property
    def flagged(self) -> list[int]:
        return [i for i, e in enumerate(self.max_rel_error) if not e < self.tolerance]

    @property
    def passed(self) -> bool:
        return not self.flagged

    @property
    def worst(self) -> float:
        return max(self.max_rel_error, default=0.0)


def _scalar_value(out) -> float:
    data = out.data if isinstance(out, Tensor) else np.asarray(out)
    if data.size != 1:
        raise ContractError(f"grad_check function must return a scalar, got shape {data.shape}")
    return float(data.reshape(-1)[0])


def grad_check(f: Callable[..., Tensor], inputs: Sequence[Tensor], step: float = 1e-5,
               tolerance: float = 1e-4, floor: float = 1e-6) -> GradCheckReport:
    """Compare tape gradients of scalar ``f(*inputs)`` with central differences.

    The relative error of an entry is ``|a - n| / max(|a|, |n|, floor)``; the
    floor keeps entries whose true gradient is ~0 from reporting noise as error.
    Inputs are perturbed in place and restored afterwards.
    """
    if step <= 0:
        raise ContractError(f"step must be positive, got {step}")
    base = _scalar_value(f(*inputs))
    if _scalar_value(f(*inputs)) != base:
        raise ContractError("function is not deterministic: two evaluations differ")

    saved = [(t.requires_grad, t._grad) for t in inputs]
    try:
        for t in inputs:
            t.requires_grad = True
            t._grad = None
        with Tape() as tape:
            out = f(*inputs)
            tape.backward(out)
        analytic = [t.grad.copy() for t in inputs]
    finally:
        for t, (rg, g) in zip(inputs, saved):
            t.requires_grad, t._grad = rg, g

    errors, worst = [], []
    for t, a in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        a = a.reshape(-1)
        max_err, max_at = 0.0, ()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = _scalar_value(f(*inputs))
            flat[i] = orig - step
            fm = _scalar_value(f(*inputs))
            flat[i] = orig
            num = (fp - fm) / (2 * step)
            err = abs(a[i] - num) / max(abs(a[i]), abs(num), floor)
            if err > max_err:
                max_err, max_at = float(err), np.unravel_index(i, t.shape)
        errors.append(max_err)
        worst.append(tuple(int(j) for j in max_at))
    return GradCheckReport(errors, tolerance, worst)
