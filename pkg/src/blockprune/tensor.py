"""Dense float64 tensors with a small reverse-mode autodiff tape.

Operations record themselves on the tape that is active in the current
context (see :class:`Tape`).  Outside a tape they simply compute values,
which is what inference and finite-difference probes use.
"""

from __future__ import annotations

import contextvars
from collections import OrderedDict
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np
from scipy import sparse
from scipy.special import expit

__all__ = [
    "Tensor",
    "Tape",
    "TapeError",
    "grad_check",
    "count_flops",
    "matmul",
    "add",
    "sub",
    "mul",
    "relu",
    "silu",
    "concat",
    "slice_last",
    "sum",
    "mean",
    "l1_loss",
    "l2_loss",
    "gather",
    "scatter_add",
]

_active_tape: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar("active_tape", default=None)
_flop_counter: contextvars.ContextVar["list[int] | None"] = contextvars.ContextVar("flop_counter", default=None)


class TapeError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class _Record:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out: Tensor, inputs: tuple[Tensor, ...], backward: Callable):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Ordered record of primitive applications.

    Use as a context manager; every primitive evaluated inside the block with
    at least one ``requires_grad`` input is appended.  A tape can be replayed
    backwards exactly once.
    """

    def __init__(self):
        self.records: list[_Record] = []
        self.watched: dict[int, Tensor] = {}
        self.consumed = False
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _active_tape.reset(self._token)
        self._token = None

    def _record(self, out: Tensor, inputs: tuple[Tensor, ...], backward: Callable) -> None:
        if self.consumed:
            raise TapeError("cannot record on a tape that was already consumed")
        for t in inputs:
            if t.requires_grad:
                self.watched.setdefault(id(t), t)
        self.watched[id(out)] = out
        self.records.append(_Record(out, inputs, backward))

    def backward(self, loss: Tensor) -> None:
        if self.consumed:
            raise TapeError("tape already consumed")
        if loss.data.size != 1:
            raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if id(loss) not in self.watched:
            raise TapeError("loss was not produced on this tape")
        self.consumed = True
        for t in self.watched.values():
            t.grad = None

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for rec in reversed(self.records):
            g_out = grads.pop(id(rec.out), None)
            if g_out is None:
                continue
            # kept so intermediate tensors (e.g. concatenated features) can be inspected
            rec.out.grad = g_out
            in_grads = rec.backward(g_out)
            for t, g in zip(rec.inputs, in_grads):
                if g is None or not t.requires_grad:
                    continue
                key = id(t)
                grads[key] = grads[key] + g if key in grads else g
        for key, t in self.watched.items():
            if key in grads:
                t.grad = grads[key]
            elif t.grad is None:
                t.grad = np.zeros_like(t.data)


@contextmanager
def count_flops():
    """Tally 2*m*k*n for every matrix multiply evaluated inside the block."""
    box = [0]
    token = _flop_counter.set(box)
    try:
        yield box
    finally:
        _flop_counter.reset(token)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(data: np.ndarray, inputs: tuple[Tensor, ...], backward: Callable) -> Tensor:
    tape = _active_tape.get()
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs and tape is not None)
    if out.requires_grad:
        tape._record(out, inputs, backward)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError("matmul expects 2-d operands")
    box = _flop_counter.get()
    if box is not None:
        box[0] += 2 * a.shape[0] * a.shape[1] * b.shape[1]
    ad, bd = a.data, b.data

    def backward(g):
        return (g @ bd.T if a.requires_grad else None, ad.T @ g if b.requires_grad else None)

    return _emit(ad @ bd, (a, b), backward)


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _emit(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return _emit(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data

    def backward(g):
        return (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return _emit(ad * bd, (a, b), backward)


def relu(x) -> Tensor:
    x = _as_tensor(x)
    mask = x.data > 0.0  # derivative at exactly 0 is 0

    def backward(g):
        return (g * mask,)

    return _emit(np.where(mask, x.data, 0.0), (x,), backward)


def silu(x) -> Tensor:
    x = _as_tensor(x)
    s = expit(x.data)
    xd = x.data

    def backward(g):
        return (g * (s * (1.0 + xd * (1.0 - s))),)

    return _emit(xd * s, (x,), backward)


def concat(tensors: Sequence[Tensor]) -> Tensor:
    """Concatenate along the last axis."""
    tensors = tuple(_as_tensor(t) for t in tensors)
    if not tensors:
        raise ValueError("concat needs at least one operand")
    bounds = np.cumsum([0] + [t.shape[-1] for t in tensors])

    def backward(g):
        return tuple(g[..., bounds[i]:bounds[i + 1]] for i in range(len(tensors)))

    return _emit(np.concatenate([t.data for t in tensors], axis=-1), tensors, backward)


def slice_last(x, start: int, stop: int) -> Tensor:
    """Columns [start, stop) of the last axis."""
    x = _as_tensor(x)
    shape = x.shape

    def backward(g):
        full = np.zeros(shape)
        full[..., start:stop] = g
        return (full,)

    return _emit(x.data[..., start:stop].copy(), (x,), backward)


def sum(x, axis: int | None = None) -> Tensor:  # noqa: A001
    x = _as_tensor(x)
    shape = x.shape

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _emit(np.asarray(x.data.sum(axis=axis)), (x,), backward)


def mean(x, axis: int | None = None) -> Tensor:
    x = _as_tensor(x)
    count = x.size if axis is None else x.shape[axis]
    return mul(sum(x, axis=axis), 1.0 / count)


def l1_loss(pred, target) -> Tensor:
    """Mean absolute difference; subgradient 0 where pred == target."""
    pred, target = _as_tensor(pred), _as_tensor(target)
    if pred.shape != target.shape:
        raise ValueError(f"l1_loss shape mismatch {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    n = diff.size

    def backward(g):
        s = np.sign(diff) * (g / n)
        return s, -s

    return _emit(np.asarray(np.abs(diff).mean()), (pred, target), backward)


def l2_loss(pred, target) -> Tensor:
    """Mean squared difference."""
    pred, target = _as_tensor(pred), _as_tensor(target)
    if pred.shape != target.shape:
        raise ValueError(f"l2_loss shape mismatch {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    n = diff.size

    def backward(g):
        s = diff * (2.0 * g / n)
        return s, -s

    return _emit(np.asarray((diff * diff).mean()), (pred, target), backward)


def gather(x, index: np.ndarray) -> Tensor:
    """Rows of ``x`` selected by ``index``."""
    x = _as_tensor(x)
    index = np.asarray(index, dtype=np.int64)
    rows = x.shape[0]

    def backward(g):
        return (_scatter_rows(g, index, rows),)

    return _emit(x.data[index], (x,), backward)


def scatter_add(x, index: np.ndarray, size: int) -> Tensor:
    """out[index[k]] += x[k], accumulated in ascending k."""
    x = _as_tensor(x)
    index = np.asarray(index, dtype=np.int64)
    if index.shape[0] != x.shape[0]:
        raise ValueError("scatter_add index length must match leading dimension")

    def backward(g):
        return (g[index],)

    return _emit(_scatter_rows(x.data, index, size), (x,), backward)


_plan_cache: "OrderedDict[tuple[int, int], tuple[np.ndarray, sparse.csr_matrix]]" = OrderedDict()


def _aggregation_matrix(index: np.ndarray, size: int) -> sparse.csr_matrix:
    """size x len(index) 0/1 matrix; cached per index array object."""
    key = (id(index), size)
    hit = _plan_cache.get(key)
    if hit is not None and hit[0] is index:
        _plan_cache.move_to_end(key)
        return hit[1]
    if index.size and (index.min() < 0 or index.max() >= size):
        raise IndexError("scatter index out of range")
    cols = np.arange(index.size)
    mat = sparse.csr_matrix((np.ones(index.size), (index, cols)), shape=(size, index.size))
    mat.sort_indices()
    _plan_cache[key] = (index, mat)
    if len(_plan_cache) > 256:
        _plan_cache.popitem(last=False)
    return mat


def _scatter_rows(values: np.ndarray, index: np.ndarray, size: int) -> np.ndarray:
    # CSR rows hold column indices in ascending order, so every output row is
    # accumulated in ascending k; the result is bit-reproducible.
    mat = _aggregation_matrix(index, size)
    flat = values.reshape(values.shape[0], -1)
    return np.asarray(mat @ flat).reshape((size,) + values.shape[1:])


def grad_check(fn: Callable[[Tensor], Tensor], point, step: float = 1e-5) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |central difference|)."""
    if step <= 0:
        raise ValueError("step must be positive")
    point = np.array(point, dtype=np.float64)
    with Tape() as tape:
        x = Tensor(point, requires_grad=True)
        y = fn(x)
    if not np.all(np.isfinite(y.data)):
        raise FloatingPointError("function value is not finite")
    tape.backward(y)
    analytic = x.grad

    worst = 0.0
    flat = point.reshape(-1)
    for i in range(flat.size):
        hi = flat.copy()
        lo = flat.copy()
        hi[i] += step
        lo[i] -= step
        f_hi = fn(Tensor(hi.reshape(point.shape))).item()
        f_lo = fn(Tensor(lo.reshape(point.shape))).item()
        if not (np.isfinite(f_hi) and np.isfinite(f_lo)):
            raise FloatingPointError("function value is not finite")
        numeric = (f_hi - f_lo) / (2.0 * step)
        err = abs(analytic.reshape(-1)[i] - numeric) / max(1.0, abs(numeric))
        worst = max(worst, err)
    return worst
