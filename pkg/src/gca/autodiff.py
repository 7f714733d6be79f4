"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every primitive that touches a tensor with ``requires_grad`` appends one
entry to the active tape of the current thread. ``backward`` walks that tape
once in reverse order and assigns ``grad`` to every leaf that requires it.

Broadcasting follows numpy's right-aligned rule for the elementwise
primitives (``add``, ``sub``, ``mul``, ``div``, ``mask``): missing leading
axes and axes of extent 1 are expanded. ``matmul`` contracts the last axis of
the left operand with the second-to-last axis of the right operand; both
operands must be at least 2-D and their leading (batch) axes broadcast the
same way. Adjoints of expanded axes are summed back to the input shape.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

EPS = 1e-12


class ShapeError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


class TapeError(RuntimeError):
    pass


@dataclass
class TapeEntry:
    kind: str
    inputs: tuple["Tensor", ...]
    output: "Tensor"
    adjoint: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered record of primitive applications on one thread."""

    entries: list[TapeEntry] = field(default_factory=list)
    generation: int = 0

    def record(self, entry: TapeEntry) -> None:
        entry.output._tape = self
        entry.output._generation = self.generation
        entry.output._entry_index = len(self.entries)
        self.entries.append(entry)

    def reset(self) -> None:
        self.entries.clear()
        self.generation += 1

    def backward(self, loss: "Tensor") -> None:
        if loss.size != 1:
            raise ShapeError(f"backward: loss must be scalar, got shape {list(loss.shape)}")
        if loss._tape is not self or loss._generation != self.generation:
            raise TapeError("backward: loss is detached from the active tape")
        adj: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for entry in reversed(self.entries[: loss._entry_index + 1]):
            g = adj.pop(id(entry.output), None)
            if g is None:
                continue
            for inp, gi in zip(entry.inputs, entry.adjoint(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in adj:
                    adj[key] = adj[key] + gi
                else:
                    adj[key] = gi
                if inp._tape is None:
                    leaves[key] = inp
        for key, leaf in leaves.items():
            leaf.grad = adj[key].reshape(leaf.shape)
        self.reset()


_local = threading.local()


def active_tape() -> Tape:
    tape = getattr(_local, "tape", None)
    if tape is None:
        tape = _local.tape = Tape()
    return tape


def _recording() -> bool:
    return getattr(_local, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Evaluate primitives without recording them."""
    prev = _recording()
    _local.enabled = False
    try:
        yield
    finally:
        _local.enabled = prev


class Tensor:
    __array_priority__ = 100

    def __init__(self, values, requires_grad: bool = False, name: str | None = None):
        data = np.array(values, dtype=np.float64)
        if not np.all(np.isfinite(data)):
            raise NumericError(f"non-finite value in tensor {name or ''}".strip())
        self.data = data
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._tape: Tape | None = None
        self._generation = -1
        self._entry_index = -1

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def values(self) -> np.ndarray:
        return self.data.reshape(-1)

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.size != 1:
            raise ShapeError(f"item: tensor of shape {list(self.shape)} is not a scalar")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        if self._tape is None:
            raise TapeError("backward: tensor was not produced on a tape")
        self._tape.backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={list(self.shape)}{flag})"

    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __matmul__(self, o):
        return matmul(self, o)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, index):
        return take(self, index)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None) -> "Tensor":
        return tsum(self, axis)

    def mean(self, axis=None) -> "Tensor":
        return mean(self, axis)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(kind: str, inputs: tuple[Tensor, ...], out_data: np.ndarray, adjoint) -> Tensor:
    if not np.all(np.isfinite(out_data)):
        shapes = ", ".join(str(list(t.shape)) for t in inputs)
        raise NumericError(f"{kind}: non-finite output for inputs of shape {shapes}")
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.requires_grad = _recording() and any(t.requires_grad for t in inputs)
    out.grad = None
    out.name = None
    out._tape = None
    out._generation = -1
    out._entry_index = -1
    if out.requires_grad:
        active_tape().record(TapeEntry(kind, inputs, out, adjoint))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_shape(kind: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(
            f"{kind}: shapes {list(a.shape)} and {list(b.shape)} do not broadcast"
        ) from None


# -- elementwise binary -----------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    return _emit("add", (a, b), a.data + b.data,
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    return _emit("sub", (a, b), a.data - b.data,
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    return _emit("mul", (a, b), a.data * b.data,
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    """``a / b`` with ``|b|`` clamped to at least 1e-12 (sign kept)."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    sign = np.where(b.data < 0, -1.0, 1.0)
    den = sign * np.maximum(np.abs(b.data), EPS)
    live = np.abs(b.data) >= EPS

    def adjoint(g):
        ga = _unbroadcast(g / den, a.shape)
        gb = _unbroadcast(np.where(live, -g * a.data / den**2, 0.0), b.shape)
        return ga, gb

    return _emit("div", (a, b), a.data / den, adjoint)


def mask(a, m) -> Tensor:
    """Multiply by a constant gate; the gate receives no adjoint."""
    a = as_tensor(a)
    m = m.data if isinstance(m, Tensor) else np.asarray(m, dtype=np.float64)
    try:
        np.broadcast_shapes(a.shape, m.shape)
    except ValueError:
        raise ShapeError(f"mask: shapes {list(a.shape)} and {list(m.shape)} do not broadcast") from None
    return _emit("mask", (a,), a.data * m, lambda g: (_unbroadcast(g * m, a.shape),))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot contract shapes {list(a.shape)} and {list(b.shape)}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(
            f"matmul: batch axes of {list(a.shape)} and {list(b.shape)} do not broadcast"
        ) from None

    def adjoint(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _emit("matmul", (a, b), a.data @ b.data, adjoint)


# -- elementwise unary ------------------------------------------------------


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _emit("neg", (a,), -a.data, lambda g: (-g,))


def sin(a) -> Tensor:
    a = as_tensor(a)
    return _emit("sin", (a,), np.sin(a.data), lambda g: (g * np.cos(a.data),))


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    s = _stable_sigmoid(a.data)
    return _emit("sigmoid", (a,), s, lambda g: (g * s * (1.0 - s),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    t = np.tanh(a.data)
    return _emit("tanh", (a,), t, lambda g: (g * (1.0 - t * t),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    return _emit("relu", (a,), np.maximum(a.data, 0.0), lambda g: (g * (a.data > 0),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        e = np.exp(a.data)
    return _emit("exp", (a,), e, lambda g: (g * e,))


def log(a) -> Tensor:
    """Natural log with the argument clamped to at least 1e-12."""
    a = as_tensor(a)
    x = np.maximum(a.data, EPS)
    live = a.data >= EPS
    return _emit("log", (a,), np.log(x), lambda g: (np.where(live, g / x, 0.0),))


def square(a) -> Tensor:
    a = as_tensor(a)
    return _emit("square", (a,), a.data * a.data, lambda g: (2.0 * g * a.data,))


def absolute(a) -> Tensor:
    """``|a|``; the subgradient at 0 is taken as 0."""
    a = as_tensor(a)
    return _emit("abs", (a,), np.abs(a.data), lambda g: (g * np.sign(a.data),))


def clip(a, lo: float, hi: float) -> Tensor:
    a = as_tensor(a)
    live = (a.data >= lo) & (a.data <= hi)
    return _emit("clip", (a,), np.clip(a.data, lo, hi), lambda g: (g * live,))


def softmax(a) -> Tensor:
    """Softmax over the last axis."""
    a = as_tensor(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)
    return _emit("softmax", (a,), s,
                 lambda g: (s * (g - (g * s).sum(axis=-1, keepdims=True)),))


def logsumexp(a) -> Tensor:
    """Log-sum-exp over the last axis (the axis is dropped)."""
    a = as_tensor(a)
    mx = a.data.max(axis=-1, keepdims=True)
    e = np.exp(a.data - mx)
    tot = e.sum(axis=-1, keepdims=True)
    out = (np.log(tot) + mx)[..., 0]
    return _emit("logsumexp", (a,), out, lambda g: (g[..., None] * e / tot,))


# -- structural -------------------------------------------------------------


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    """Concatenate along the last axis; all other extents must agree."""
    ts = tuple(as_tensor(t) for t in tensors)
    if not ts:
        raise ShapeError("concat: no inputs")
    if axis != -1:
        raise ShapeError("concat: only the last axis is supported")
    head = ts[0].shape[:-1]
    for t in ts[1:]:
        if t.shape[:-1] != head:
            raise ShapeError(
                f"concat: leading shapes {list(ts[0].shape)} and {list(t.shape)} differ"
            )
    bounds = np.cumsum([0] + [t.shape[-1] for t in ts])

    def adjoint(g):
        return [g[..., bounds[i]:bounds[i + 1]] for i in range(len(ts))]

    return _emit("concat", ts, np.concatenate([t.data for t in ts], axis=-1), adjoint)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    """Stack equally shaped tensors along a new axis."""
    ts = tuple(as_tensor(t) for t in tensors)
    if not ts:
        raise ShapeError("stack: no inputs")
    for t in ts[1:]:
        if t.shape != ts[0].shape:
            raise ShapeError(f"stack: shapes {list(ts[0].shape)} and {list(t.shape)} differ")
    out = np.stack([t.data for t in ts], axis=axis)
    ax = axis if axis >= 0 else out.ndim + axis
    return _emit("stack", ts, out, lambda g: [np.take(g, i, axis=ax) for i in range(len(ts))])


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {list(a.shape)} as {list(shape)}") from None
    return _emit("reshape", (a,), out, lambda g: (g.reshape(a.shape),))


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError:
        raise ShapeError(f"broadcast_to: cannot expand {list(a.shape)} to {list(shape)}") from None
    return _emit("broadcast", (a,), out, lambda g: (_unbroadcast(g, a.shape),))


def take(a, index) -> Tensor:
    """Basic or integer-array indexing; repeated indices accumulate adjoints."""
    a = as_tensor(a)
    out = np.array(a.data[index])

    def adjoint(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _emit("index", (a,), out, adjoint)


def tsum(a, axis=None) -> Tensor:
    a = as_tensor(a)
    out = np.asarray(a.data.sum(axis=axis))

    def adjoint(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _emit("sum", (a,), out, adjoint)


def mean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    out = np.asarray(a.data.mean(axis=axis))
    n = a.size / max(out.size, 1)

    def adjoint(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, a.shape).copy(),)

    return _emit("mean", (a,), out, adjoint)


_PRIMITIVES: dict[str, Callable] = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "matmul": matmul,
    "sin": sin,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "relu": relu,
    "exp": exp,
    "log": log,
    "abs": absolute,
    "softmax": softmax,
    "logsumexp": logsumexp,
    "concat": lambda *ts: concat(ts),
    "mask": mask,
    "sum": tsum,
    "mean": mean,
    "square": square,
}


def apply_primitive(kind: str, inputs: Sequence) -> Tensor:
    try:
        fn = _PRIMITIVES[kind]
    except KeyError:
        raise ValueError(f"unknown primitive {kind!r}") from None
    return fn(*inputs)


def backward(loss: Tensor) -> None:
    loss.backward()


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5,
                      coords: Sequence[int] | None = None) -> float:
    """Compare reverse-mode gradients of ``f`` at ``x`` with central differences.

    Returns ``max |analytic - numeric| / max(1, |numeric|)`` over the probed
    coordinates (all of them unless ``coords`` is given).
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    base = x.data.copy()
    probe = Tensor(base, requires_grad=True)
    tape = active_tape()
    tape.reset()
    out = f(probe)
    first = out.data.copy()
    tape.backward(out)
    analytic = np.zeros_like(base) if probe.grad is None else probe.grad.reshape(-1)
    with no_grad():
        again = f(Tensor(base)).data
    if not np.array_equal(first, again):
        raise RuntimeError("finite_diff_check: f is not deterministic")

    flat = base.reshape(-1)
    idx = range(flat.size) if coords is None else coords
    worst = 0.0
    with no_grad():
        for i in idx:
            xp = flat.copy()
            xp[i] += eps
            xm = flat.copy()
            xm[i] -= eps
            fp = f(Tensor(xp.reshape(base.shape))).item()
            fm = f(Tensor(xm.reshape(base.shape))).item()
            numeric = (fp - fm) / (2 * eps)
            err = abs(analytic[i] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    return worst
