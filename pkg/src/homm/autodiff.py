"""Reverse-mode automatic differentiation over dense float64 arrays.

Operations executed while a :class:`Tape` is active are recorded in order;
``backward`` sweeps the recording in reverse.  Outside a tape every operation
is a plain numpy computation, which is what evaluation code relies on.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

LEAKY_SLOPE = 0.2
BCE_CLAMP = 1e-7

_state = threading.local()


class DimensionError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


@dataclass
class _Node:
    out: "Tensor"
    inputs: tuple
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; tapes are per-thread and may nest (the innermost
    one records).
    """

    nodes: list = field(default_factory=list)

    def __enter__(self) -> "Tape":
        stack = getattr(_state, "stack", None)
        if stack is None:
            stack = _state.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _state.stack.pop()

    def record(self, out: "Tensor", inputs: tuple, backward) -> None:
        out.node = len(self.nodes)
        out.tape = self
        self.nodes.append(_Node(out, inputs, backward))

    def backward(self, loss: "Tensor", params: Iterable["Tensor"] = ()) -> list[np.ndarray]:
        """Gradients of scalar ``loss`` for each tensor in ``params``.

        Every parameter gets an array; parameters the loss does not reach get
        zeros.
        """
        if loss.data.size != 1:
            raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {}
        if loss.node is not None and loss.tape is self:
            grads[id(loss)] = np.ones_like(loss.data)
        for node in reversed(self.nodes):
            g = grads.get(id(node.out))
            if g is None:
                continue
            if not node.out.requires_grad or node.out.is_leaf:
                continue
            del grads[id(node.out)]
            for inp, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not isinstance(inp, Tensor) or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        out = []
        for p in params:
            g = grads.get(id(p))
            out.append(np.zeros_like(p.data) if g is None else g.reshape(p.data.shape))
        return out


def active_tape() -> Tape | None:
    stack = getattr(_state, "stack", None)
    return stack[-1] if stack else None


class Tensor:
    """A float64 array that may participate in the active tape."""

    __slots__ = ("data", "requires_grad", "is_leaf", "node", "tape", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.is_leaf = True
        self.node = None
        self.tape = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        label = f" {self.name}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, inputs: tuple, backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.node = None
    out.tape = None
    out.name = None
    out.is_leaf = False
    tape = active_tape()
    out.requires_grad = tape is not None and any(
        isinstance(t, Tensor) and t.requires_grad for t in inputs
    )
    if out.requires_grad:
        tape.record(out, inputs, backward)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(a: np.ndarray, b: np.ndarray, op: str) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not match") from None


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        return g @ bd.T, ad.T @ g

    return _result(ad @ bd, (a, b), backward)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "add")
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "sub")
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "mul")
    ad, bd = a.data, b.data

    def backward(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _result(ad * bd, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _result(a.data * c, (a,), lambda g: (g * c,))


def elementwise(kind: str, a, b) -> Tensor:
    if kind == "add":
        return add(a, b)
    if kind == "sub":
        return sub(a, b)
    if kind == "mul":
        return mul(a, b)
    if kind == "scale":
        return scale(a, b)
    raise ValueError(f"unknown elementwise op {kind!r}")


def leaky_relu(x: Tensor, slope: float = LEAKY_SLOPE) -> Tensor:
    x = as_tensor(x)
    d = np.where(x.data > 0, 1.0, slope)
    return _result(x.data * d, (x,), lambda g: (g * d,))


def sigmoid(x: Tensor) -> Tensor:
    x = as_tensor(x)
    y = np.empty_like(x.data)
    pos = x.data >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
    e = np.exp(x.data[~pos])
    y[~pos] = e / (1.0 + e)
    return _result(y, (x,), lambda g: (g * y * (1.0 - y),))


def tanh(x: Tensor) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.data)
    return _result(y, (x,), lambda g: (g * (1.0 - y * y),))


def activation(kind: str, x: Tensor) -> Tensor:
    if kind == "leaky_relu":
        return leaky_relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "tanh":
        return tanh(x)
    if kind == "linear":
        return as_tensor(x)
    raise ValueError(f"unknown activation {kind!r}")


def _axis(x: Tensor, axis: int) -> int:
    nd = x.data.ndim
    if not -nd <= axis < nd:
        raise DimensionError(f"axis {axis} invalid for shape {x.shape}")
    return axis % nd


def reduce_max(x: Tensor, axis: int = 0, keepdims: bool = True) -> Tensor:
    x = as_tensor(x)
    axis = _axis(x, axis)
    idx = np.argmax(x.data, axis=axis)  # first index on ties
    out = np.take_along_axis(x.data, np.expand_dims(idx, axis), axis=axis)
    shape = x.shape

    def backward(g):
        g = g if keepdims else np.expand_dims(g, axis)
        gx = np.zeros(shape)
        np.put_along_axis(gx, np.expand_dims(idx, axis), g, axis=axis)
        return (gx,)

    return _result(out if keepdims else out.squeeze(axis), (x,), backward)


def reduce_mean(x: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    if axis is None:
        n = x.data.size
        shape = x.shape
        return _result(np.asarray(x.data.mean()), (x,), lambda g: (np.full(shape, float(g) / n),))
    axis = _axis(x, axis)
    n = x.shape[axis]
    shape = x.shape

    def backward(g):
        g = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, shape).copy(),)

    return _result(x.data.mean(axis=axis, keepdims=keepdims), (x,), backward)


def reduce_sum(x: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    if axis is None:
        return _result(np.asarray(x.data.sum()), (x,), lambda g: (np.full(shape, float(g)),))
    axis = _axis(x, axis)

    def backward(g):
        g = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _result(x.data.sum(axis=axis, keepdims=keepdims), (x,), backward)


def reduce(kind: str, x: Tensor, axis: int = 0) -> Tensor:
    if kind == "max":
        return reduce_max(x, axis)
    if kind == "mean":
        return reduce_mean(x, axis)
    raise ValueError(f"unknown reduction {kind!r}")


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise DimensionError("concat of nothing")
    if len(parts) == 1:
        return parts[0]
    nd = parts[0].data.ndim
    ax = axis % nd
    for p in parts[1:]:
        if p.data.ndim != nd or any(
            p.shape[i] != parts[0].shape[i] for i in range(nd) if i != ax
        ):
            raise DimensionError(f"concat: incompatible shapes {[q.shape for q in parts]}")
    sizes = np.cumsum([p.shape[ax] for p in parts])[:-1]

    def backward(g):
        return tuple(np.split(g, sizes, axis=ax))

    return _result(np.concatenate([p.data for p in parts], axis=ax), tuple(parts), backward)


def reshape(x: Tensor, shape: tuple) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def take_flat(x: Tensor, start: int, stop: int) -> Tensor:
    """Contiguous slice of the flattened tensor."""
    x = as_tensor(x)
    shape = x.shape

    def backward(g):
        gx = np.zeros(int(np.prod(shape)))
        gx[start:stop] = g.reshape(-1)
        return (gx.reshape(shape),)

    return _result(x.data.reshape(-1)[start:stop].copy(), (x,), backward)


def take_cols(x: Tensor, start: int, stop: int) -> Tensor:
    """Columns ``start:stop`` of a 2-D tensor."""
    x = as_tensor(x)
    shape = x.shape

    def backward(g):
        gx = np.zeros(shape)
        gx[:, start:stop] = g
        return (gx,)

    return _result(x.data[:, start:stop].copy(), (x,), backward)


def take_rows(table: Tensor, idx) -> Tensor:
    """Row gather (embedding lookup); gradient scatters back with accumulation."""
    table = as_tensor(table)
    idx = np.asarray(idx, dtype=np.int64)
    shape = table.shape

    def backward(g):
        gt = np.zeros(shape)
        np.add.at(gt, idx, g)
        return (gt,)

    return _result(table.data[idx], (table,), backward)


def loss_l2(pred: Tensor, target) -> Tensor:
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise DimensionError(f"loss_l2: {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    n = diff.size

    def backward(g):
        gd = 2.0 * float(g) * diff / n
        return gd, -gd

    return _result(np.asarray(np.mean(diff * diff)), (pred, target), backward)


def loss_bce(prob: Tensor, label) -> Tensor:
    prob = as_tensor(prob)
    y = np.asarray(label.data if isinstance(label, Tensor) else label, dtype=np.float64)
    if prob.shape != y.shape:
        raise DimensionError(f"loss_bce: {prob.shape} vs {y.shape}")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("loss_bce labels must be 0 or 1")
    raw = prob.data
    p = np.clip(raw, BCE_CLAMP, 1.0 - BCE_CLAMP)
    inside = (raw > BCE_CLAMP) & (raw < 1.0 - BCE_CLAMP)
    n = p.size
    value = -np.mean(y * np.log(p) + (1.0 - y) * np.log(1.0 - p))

    def backward(g):
        return (float(g) * inside * (-(y / p) + (1.0 - y) / (1.0 - p)) / n,)

    return _result(np.asarray(value), (prob,), backward)


def backward(loss: Tensor, params: Iterable[Tensor]) -> list[np.ndarray]:
    """Gradients of ``loss`` for ``params`` using the tape that produced it."""
    params = list(params)
    if loss.data.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.tape is None:
        return [np.zeros_like(p.data) for p in params]
    return loss.tape.backward(loss, params)


@dataclass
class GradientReport:
    """Finite-difference comparison, one entry per parameter block."""

    max_rel_error: dict[str, float]
    tolerance: float

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.worst < self.tolerance


def check_gradients(
    build: Callable[[], Tensor],
    params: Sequence[Tensor],
    step: float = 1e-5,
    tolerance: float = 1e-4,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradientReport:
    """Compare tape gradients with central finite differences.

    ``build`` must rebuild the scalar loss from the current parameter values
    deterministically.  ``max_entries`` caps the number of entries probed per
    block (chosen at random) to keep large blocks affordable.

    The per-block error is ``|fd - tape| / (|fd| + |tape|)`` in the max norm over
    probed entries, with 0 when both vanish.
    """
    params = list(params)
    with Tape():
        loss = build()
        if not np.all(np.isfinite(loss.data)):
            raise NonFiniteError("loss is not finite")
        grads = backward(loss, params)
    rng = rng or np.random.default_rng(0)
    report: dict[str, float] = {}

    def value() -> float:
        v = build().item()
        if not np.isfinite(v):
            raise NonFiniteError("loss is not finite during finite differencing")
        return v

    for i, (p, g) in enumerate(zip(params, grads)):
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, size=max_entries, replace=False)
        fd = np.empty(len(idx))
        for j, k in enumerate(idx):
            orig = flat[k]
            flat[k] = orig + step
            up = value()
            flat[k] = orig - step
            down = value()
            flat[k] = orig
            fd[j] = (up - down) / (2.0 * step)
        an = g.reshape(-1)[idx]
        num = np.max(np.abs(fd - an), initial=0.0)
        den = np.max(np.abs(fd) + np.abs(an), initial=0.0)
        report[p.name or f"param{i}"] = 0.0 if den == 0.0 else float(num / den)
    return GradientReport(report, tolerance)
