"""Tensor, Parameter and the tape that records primitive applications.

Every primitive (see :mod:`reltab.autograd.ops`) appends one :class:`TapeEntry`
to the tape of the current thread when at least one input requires a
gradient. Entries are appended in evaluation order, so the tape is already
topologically sorted and :func:`backward` just walks it in reverse.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from ..errors import NonFiniteError, NotScalarError

_DEFAULT_DTYPE = np.float64


def set_default_dtype(dtype) -> None:
    """Switch new tensors to float32 or float64 (the default)."""
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError("only float32 and float64 are supported")
    _DEFAULT_DTYPE = dtype


def get_default_dtype():
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def default_dtype(dtype):
    old = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(old)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_entry", "__weakref__")

    # make ndarray defer to our reflected operators
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype or _DEFAULT_DTYPE)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name
        self._entry = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

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
    def is_leaf(self) -> bool:
        return self._entry is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    # operator sugar; implementations live in ops
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        if np.isscalar(other):
            return ops.scale(self, other)
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops
        return ops.scale(self, -1.0)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __rmatmul__(self, other):
        from . import ops
        return ops.matmul(other, self)

    def __getitem__(self, index):
        from . import ops
        return ops.slice(self, index)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes):
        from . import ops
        return ops.transpose(self, axes or None)

    @property
    def T(self):
        return self.transpose()

    def sum(self, axis=None, keepdims=False):
        from . import ops
        return ops.sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        from . import ops
        return ops.mean(self, axis, keepdims)


class Parameter(Tensor):
    """Trainable leaf tensor; gradients accumulate in ``grad`` until zeroed."""

    __slots__ = ()

    def __init__(self, data, name: str | None = None, dtype=None):
        super().__init__(data, requires_grad=True, name=name, dtype=dtype)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


@dataclass(eq=False)
class TapeEntry:
    op: str
    inputs: tuple
    output: Tensor
    backward_fn: Callable  # grad_out -> tuple of input grads (None where not needed)


class Tape:
    def __init__(self):
        self.entries: list[TapeEntry] = []

    def __len__(self) -> int:
        return len(self.entries)

    def record(self, entry: TapeEntry) -> None:
        entry.output._entry = entry
        self.entries.append(entry)

    def clear(self) -> None:
        for e in self.entries:
            e.output._entry = None
        self.entries.clear()


class _State(threading.local):
    def __init__(self):
        self.tape = Tape()
        self.grad_enabled = True


_state = _State()


def current_tape() -> Tape:
    return _state.tape


def is_grad_enabled() -> bool:
    return _state.grad_enabled


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording anything on the tape."""
    old = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = old


@contextlib.contextmanager
def fresh_tape():
    """Record onto a private tape for the duration of the block."""
    old = _state.tape
    _state.tape = Tape()
    try:
        yield _state.tape
    finally:
        _state.tape.clear()
        _state.tape = old


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def record(op: str, out: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    """Wrap a primitive's forward value and, if needed, put it on the tape."""
    if not np.all(np.isfinite(out)):
        raise NonFiniteError(f"{op} produced a non-finite value")
    result = Tensor(out, dtype=out.dtype)
    if _state.grad_enabled and any(t.requires_grad for t in inputs):
        result.requires_grad = True
        _state.tape.record(TapeEntry(op, tuple(inputs), result, backward_fn))
    return result


def backward(loss: Tensor) -> None:
    """Reverse-mode sweep from a scalar ``loss``; accumulates into leaf ``grad``.

    The tape is consumed: after the call it is empty.
    """
    if loss.size != 1:
        raise NotScalarError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = _state.tape
    if loss.is_leaf and not loss.requires_grad:
        raise NotScalarError("loss is not on the tape and does not require grad")
    if not loss.is_leaf and loss._entry not in tape.entries:
        raise NotScalarError("loss was recorded on a different tape")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    if loss.is_leaf:
        leaves[id(loss)] = loss
    try:
        for entry in reversed(tape.entries):
            g = grads.pop(id(entry.output), None)
            if g is None:
                continue
            in_grads = entry.backward_fn(g)
            for t, gi in zip(entry.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                if t.is_leaf:
                    leaves[key] = t
        for key, t in leaves.items():
            g = grads.get(key)
            if g is None:
                continue
            g = np.asarray(g, dtype=t.data.dtype).reshape(t.shape)
            t.grad = g.copy() if t.grad is None else t.grad + g
    finally:
        tape.clear()
