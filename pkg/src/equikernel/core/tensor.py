"""Dense tensors with a reverse-mode gradient tape.

Operations record themselves on the innermost active :class:`GradTape`; when no
tape is active they run as plain numpy and keep nothing alive.
"""
from __future__ import annotations

import os
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

AXIS_LABELS = frozenset("TCHWNLD")


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""

    def __init__(self, message: str, *shapes):
        if shapes:
            message = f"{message}: " + " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(message)
        self.shapes = shapes


class NonFiniteError(FloatingPointError):
    pass


class Tensor:
    """An n-d float array, optionally carrying semantic axis labels.

    ``axes`` is a string such as ``"TCHW"``; ops that know their output layout
    propagate it, everything else drops it.
    """

    def __init__(self, data, axes: str | None = None, requires_grad: bool = False):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float32)
        self.data = arr
        if axes is not None:
            if len(axes) != arr.ndim or not set(axes) <= AXIS_LABELS:
                raise ShapeError(f"axis labels {axes!r} do not fit array", arr.shape)
        self.axes = axes
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        lab = f", axes={self.axes!r}" if self.axes else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{lab})"

    def __len__(self):
        return self.shape[0]

    # operator sugar, defined in terms of the functions below
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p: float):
        return power(self, p)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *perm):
        if len(perm) == 1 and isinstance(perm[0], (tuple, list)):
            perm = tuple(perm[0])
        return transpose(self, perm or None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), self.axes, self.requires_grad)


class Parameter(Tensor):
    """A learnable tensor; every tape watches parameters automatically."""

    def __init__(self, data, axes: str | None = None):
        super().__init__(data, axes, requires_grad=True)


Backward = Callable[[np.ndarray, tuple[bool, ...]], Sequence[np.ndarray | None]]

_local = threading.local()


def _stack() -> list:
    if not hasattr(_local, "tapes"):
        _local.tapes = []
    return _local.tapes


def active_tape() -> "GradTape | None":
    st = _stack()
    return st[-1] if st else None


class GradTape:
    """Records differentiable operations for one backward pass.

    Usage::

        with GradTape() as tape:
            loss = f(params)
        grads = tape.gradient(loss, params)

    A tape is single-owner and not thread-safe; each thread has its own stack
    of active tapes.
    """

    def __init__(self):
        self._records: list[tuple[Tensor, tuple[Tensor, ...], tuple[bool, ...], Backward]] = []
        self._tracked: set[int] = set()
        self._watched: list[Tensor] = []

    def __enter__(self):
        _stack().append(self)
        return self

    def __exit__(self, *exc):
        st = _stack()
        if st and st[-1] is self:
            st.pop()
        return False

    def watch(self, *tensors: Tensor) -> None:
        for t in tensors:
            self._tracked.add(id(t))
            self._watched.append(t)

    def is_tracked(self, t: Tensor) -> bool:
        return t.requires_grad or id(t) in self._tracked

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], needs: tuple[bool, ...], backward: Backward):
        self._tracked.add(id(out))
        self._records.append((out, inputs, needs, backward))

    def __len__(self):
        return len(self._records)

    def _backprop(self, target: Tensor, seed, keep: set[int]) -> dict[int, np.ndarray]:
        if seed is None:
            if target.size != 1:
                raise ShapeError("gradient seed required for non-scalar target", target.shape)
            seed = np.ones_like(target.data)
        grads: dict[int, np.ndarray] = {id(target): np.asarray(seed, dtype=target.dtype)}
        for out, inputs, needs, backward in reversed(self._records):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            in_grads = backward(g, needs)
            for t, need, gi in zip(inputs, needs, in_grads):
                if not need or gi is None:
                    continue
                key = id(t)
                if gi.dtype != t.dtype:
                    gi = gi.astype(t.dtype)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
            if id(out) in keep:
                grads[-id(out) - 1] = g
        return grads

    def gradient(self, target: Tensor, sources: Iterable[Tensor], seed=None) -> list[np.ndarray]:
        """Gradients of ``target`` w.r.t. each source (zeros where untouched)."""
        sources = list(sources)
        grads = self._backprop(target, seed, {id(s) for s in sources})
        out = []
        for s in sources:
            g = grads.get(id(s))
            if g is None:
                g = grads.get(-id(s) - 1)
            out.append(np.zeros_like(s.data) if g is None else g)
        return out

    def backward(self, target: Tensor, params: Iterable[Parameter], seed=None) -> None:
        """Accumulate gradients into ``p.grad`` for every given parameter."""
        params = list(params)
        for p, g in zip(params, self.gradient(target, params, seed)):
            p.grad = g if p.grad is None else p.grad + g


def no_tape():
    """Context manager that suspends recording (e.g. for evaluation)."""

    class _NoTape:
        def __enter__(self):
            _stack().append(None)

        def __exit__(self, *exc):
            _stack().pop()
            return False

    return _NoTape()


def astensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def needs_of(*inputs: Tensor) -> tuple[bool, ...] | None:
    """Which inputs need gradients on the active tape; None if nothing records."""
    tape = active_tape()
    if tape is None:
        return None
    needs = tuple(tape.is_tracked(t) for t in inputs)
    return needs if any(needs) else None


_DEBUG = {"finite": os.environ.get("EQUIKERNEL_DEBUG", "") not in ("", "0")}


def set_debug(enabled: bool) -> bool:
    """Toggle the finiteness check on every op output; returns the old value.
    Also enabled by a non-empty ``EQUIKERNEL_DEBUG``."""
    old = _DEBUG["finite"]
    _DEBUG["finite"] = bool(enabled)
    return old


def emit(data: np.ndarray, inputs: tuple[Tensor, ...], needs, backward: Backward,
         axes: str | None = None) -> Tensor:
    if _DEBUG["finite"] and not np.all(np.isfinite(data)):
        if all(np.all(np.isfinite(t.data)) for t in inputs):
            op = getattr(backward, "__qualname__", "op").split(".")[0]
            raise NonFiniteError(f"{op} produced non-finite values from finite inputs")
    out = Tensor(data, axes)
    if needs is not None:
        active_tape().record(out, inputs, needs, backward)
    return out


def unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    keep = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if keep:
        g = g.sum(axis=keep, keepdims=True)
    return g.reshape(shape)


def _cast_like(x, ref: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=ref.dtype))


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if not isinstance(a, Tensor) and not isinstance(b, Tensor):
        a = Tensor(a)
    a = a if isinstance(a, Tensor) else _cast_like(a, b)
    b = b if isinstance(b, Tensor) else _cast_like(b, a)
    return a, b


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    needs = needs_of(a, b)

    def backward(g, needs):
        return (unbroadcast(g, a.shape) if needs[0] else None,
                unbroadcast(g, b.shape) if needs[1] else None)

    axes = a.axes if a.shape == np.broadcast_shapes(a.shape, b.shape) else None
    return emit(a.data + b.data, (a, b), needs, backward, axes)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    needs = needs_of(a, b)

    def backward(g, needs):
        return (unbroadcast(g, a.shape) if needs[0] else None,
                unbroadcast(-g, b.shape) if needs[1] else None)

    return emit(a.data - b.data, (a, b), needs, backward)


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    needs = needs_of(a, b)

    def backward(g, needs):
        return (unbroadcast(g * b.data, a.shape) if needs[0] else None,
                unbroadcast(g * a.data, b.shape) if needs[1] else None)

    axes = a.axes if a.shape == np.broadcast_shapes(a.shape, b.shape) else None
    return emit(a.data * b.data, (a, b), needs, backward, axes)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    needs = needs_of(a, b)
    out = a.data / b.data

    def backward(g, needs):
        return (unbroadcast(g / b.data, a.shape) if needs[0] else None,
                unbroadcast(-g * out / b.data, b.shape) if needs[1] else None)

    return emit(out, (a, b), needs, backward)


def power(a: Tensor, p: float) -> Tensor:
    needs = needs_of(a)

    def backward(g, needs):
        return (g * p * a.data ** (p - 1),)

    return emit(a.data ** p, (a,), needs, backward, a.axes)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    needs = needs_of(a)
    return emit(out, (a,), needs, lambda g, n: (g * out,), a.axes)


def log(a: Tensor) -> Tensor:
    needs = needs_of(a)
    return emit(np.log(a.data), (a,), needs, lambda g, n: (g / a.data,), a.axes)


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    needs = needs_of(a)
    return emit(out, (a,), needs, lambda g, n: (g * 0.5 / out,), a.axes)


def clamp_min(a: Tensor, lo: float) -> Tensor:
    mask = a.data > lo
    needs = needs_of(a)
    return emit(np.maximum(a.data, lo), (a,), needs, lambda g, n: (g * mask,), a.axes)


def maximum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise max; at ties the gradient is split evenly."""
    needs = needs_of(a, b)
    gt = a.data > b.data
    eq = a.data == b.data

    def backward(g, needs):
        wa = gt + 0.5 * eq
        return (unbroadcast(g * wa, a.shape) if needs[0] else None,
                unbroadcast(g * (1.0 - wa), b.shape) if needs[1] else None)

    axes = a.axes if a.shape == b.shape else None
    return emit(np.maximum(a.data, b.data), (a, b), needs, backward, axes)


def where(mask: np.ndarray, a: Tensor, b: Tensor) -> Tensor:
    needs = needs_of(a, b)

    def backward(g, needs):
        return (unbroadcast(np.where(mask, g, 0), a.shape) if needs[0] else None,
                unbroadcast(np.where(mask, 0, g), b.shape) if needs[1] else None)

    return emit(np.where(mask, a.data, b.data), (a, b), needs, backward)


# ---------------------------------------------------------------------------
# reductions and shape plumbing
# ---------------------------------------------------------------------------

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    ax = _norm_axis(axis, a.ndim)
    needs = needs_of(a)

    def backward(g, needs):
        if not keepdims:
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, a.shape).copy(),)

    return emit(a.data.sum(axis=ax, keepdims=keepdims), (a,), needs, backward)


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    ax = _norm_axis(axis, a.ndim)
    n = int(np.prod([a.shape[i] for i in ax])) if ax else 1
    needs = needs_of(a)

    def backward(g, needs):
        if not keepdims:
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g / n, a.shape).copy(),)

    return emit(a.data.mean(axis=ax, keepdims=keepdims), (a,), needs, backward)


def amax(a: Tensor, axis=None, keepdims=False) -> Tensor:
    """Max reduction; tied maxima share the gradient evenly."""
    ax = _norm_axis(axis, a.ndim)
    out = a.data.max(axis=ax, keepdims=True)
    needs = needs_of(a)

    def backward(g, needs):
        mask = a.data == out
        cnt = mask.sum(axis=ax, keepdims=True)
        if not keepdims:
            g = np.expand_dims(g, ax)
        return (mask * (g / cnt),)

    res = out if keepdims else np.squeeze(out, axis=ax)
    return emit(res, (a,), needs, backward)


def reshape(a: Tensor, shape) -> Tensor:
    needs = needs_of(a)
    return emit(a.data.reshape(shape), (a,), needs, lambda g, n: (g.reshape(a.shape),))


def transpose(a: Tensor, perm=None) -> Tensor:
    perm = tuple(range(a.ndim))[::-1] if perm is None else tuple(perm)
    inv = np.argsort(perm)
    needs = needs_of(a)
    axes = "".join(a.axes[p] for p in perm) if a.axes else None
    return emit(a.data.transpose(perm), (a,), needs, lambda g, n: (g.transpose(inv),), axes)


def _is_advanced(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def getitem(a: Tensor, idx) -> Tensor:
    needs = needs_of(a)
    adv = _is_advanced(idx)

    def backward(g, needs):
        out = np.zeros_like(a.data)
        if adv:
            np.add.at(out, idx, g)
        else:
            out[idx] = g
        return (out,)

    return emit(a.data[idx], (a,), needs, backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    ax = axis % tensors[0].ndim
    for t in tensors[1:]:
        if t.ndim != tensors[0].ndim or any(
                t.shape[i] != tensors[0].shape[i] for i in range(t.ndim) if i != ax):
            raise ShapeError("concat operands disagree off the join axis", tensors[0].shape, t.shape)
    sizes = [t.shape[ax] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    needs = needs_of(*tensors)

    def backward(g, needs):
        return tuple(np.split(g, cuts, axis=ax))

    axes = tensors[0].axes if all(t.axes == tensors[0].axes for t in tensors) else None
    return emit(np.concatenate([t.data for t in tensors], axis=ax), tensors, needs, backward, axes)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    needs = needs_of(*tensors)

    def backward(g, needs):
        return tuple(np.moveaxis(g, axis, 0))

    return emit(np.stack([t.data for t in tensors], axis=axis), tensors, needs, backward)


def split(a: Tensor, sizes: Sequence[int], axis: int = 0) -> list[Tensor]:
    if sum(sizes) != a.shape[axis]:
        raise ShapeError(f"split sizes {list(sizes)} do not sum to axis extent", a.shape)
    out, start = [], 0
    for s in sizes:
        idx = [slice(None)] * a.ndim
        idx[axis] = slice(start, start + s)
        piece = getitem(a, tuple(idx))
        piece.axes = a.axes
        out.append(piece)
        start += s
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading axes."""
    a, b = astensor(a), astensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul inner dimensions disagree", a.shape, b.shape)
    needs = needs_of(a, b)

    def backward(g, needs):
        ga = unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if needs[0] else None
        gb = unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if needs[1] else None
        return ga, gb

    return emit(a.data @ b.data, (a, b), needs, backward)
