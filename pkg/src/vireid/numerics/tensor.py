"""Dense float64 tensors with a reverse-mode tape.

Every differentiable operation whose inputs require gradients appends one
record to the active :class:`Tape`. ``Tape.backward`` walks the records in
exact reverse execution order and accumulates gradients into leaf tensors.
A tape can be consumed only once.
"""
from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Optional, Sequence

import numpy as np

from ..errors import ShapeError, TapeError

_state = threading.local()


def _tape_stack() -> list:
    stack = getattr(_state, "tapes", None)
    if stack is None:
        stack = _state.tapes = []
    return stack


def grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    """Run forward ops without recording them."""
    prev = grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


def current_tape() -> "Tape":
    stack = _tape_stack()
    if stack:
        return stack[-1]
    default = getattr(_state, "default_tape", None)
    if default is None or default.consumed:
        default = _state.default_tape = Tape()
    return default


class _Record:
    __slots__ = ("name", "inputs", "output", "backward")

    def __init__(self, name, inputs, output, backward):
        self.name = name
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Tape:
    """Ordered log of executed ops.

    Use as a context manager so that ops executed inside the block are
    recorded here rather than on the thread's default tape::

        with Tape() as tape:
            loss = f(x)
        tape.backward(loss)
    """

    def __init__(self):
        self.records: list[_Record] = []
        self.consumed = False

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        return False

    def __len__(self):
        return len(self.records)

    def record(self, name, inputs, output, backward):
        if self.consumed:
            raise TapeError("cannot record onto a consumed tape")
        self.records.append(_Record(name, inputs, output, backward))
        output._tape = self

    def backward(self, root: "Tensor", seed: Optional[np.ndarray] = None):
        """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every leaf.

        Returns the list of op names in the order they were visited.
        """
        if self.consumed:
            raise TapeError("backward already ran on this tape; re-execute the forward pass")
        if root._tape is not self:
            raise TapeError("root tensor was not produced on this tape")
        if seed is None:
            if root.data.size != 1:
                raise ShapeError("backward without a seed requires a scalar root")
            seed = np.ones_like(root.data)
        grads = {id(root): np.asarray(seed, dtype=np.float64)}
        visited = []
        for rec in reversed(self.records):
            g = grads.pop(id(rec.output), None)
            if g is None:
                continue
            visited.append(rec.name)
            in_grads = rec.backward(g)
            for t, gi in zip(rec.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                if gi.shape != t.data.shape:
                    raise ShapeError(f"{rec.name}: gradient shape {gi.shape} != input shape {t.data.shape}")
                if t._tape is None:
                    t.grad = gi.copy() if t.grad is None else t.grad + gi
                else:
                    prev = grads.get(id(t))
                    grads[id(t)] = gi if prev is None else prev + gi
        self.consumed = True
        self.records = []
        return visited


class Tensor:
    """Dense row-major float64 array that can take part in differentiation."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.array(data, dtype=np.float64, order="C")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._tape: Optional[Tape] = None

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        out = cls.__new__(cls)
        out.data = arr if arr.dtype == np.float64 else arr.astype(np.float64)
        out.requires_grad = False
        out.grad = None
        out.name = None
        out._tape = None
        return out

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
    def is_leaf(self) -> bool:
        return self._tape is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self, seed=None):
        if self._tape is None:
            raise TapeError("tensor was not produced by a recorded op")
        return self._tape.backward(self, seed)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self):
        return self.data.shape[0]

    # arithmetic sugar; implementations live in ops
    def __add__(self, other):
        return ops.add(self, other)

    def __radd__(self, other):
        return ops.add(other, self)

    def __sub__(self, other):
        return ops.sub(self, other)

    def __rsub__(self, other):
        return ops.sub(other, self)

    def __mul__(self, other):
        return ops.mul(self, other)

    def __rmul__(self, other):
        return ops.mul(other, self)

    def __truediv__(self, other):
        return ops.div(self, other)

    def __rtruediv__(self, other):
        return ops.div(other, self)

    def __neg__(self):
        return ops.neg(self)

    def __matmul__(self, other):
        return ops.matmul(self, other)

    def __pow__(self, exponent):
        return ops.power(self, exponent)

    def __getitem__(self, index):
        return ops.getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return ops.sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return ops.mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return ops.transpose(self, axes or None)

    @property
    def T(self):
        return ops.transpose(self, None)


def _not_scalar(t):
    raise ShapeError(f"item() needs a single-element tensor, got shape {t.shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor._wrap(np.asarray(x, dtype=np.float64))


def make_output(data: np.ndarray, inputs: Sequence[Tensor], backward: Callable, name: str) -> Tensor:
    """Wrap an op result and record it when any input needs a gradient."""
    out = Tensor._wrap(data)
    if grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        current_tape().record(name, tuple(inputs), out, backward)
    return out


from . import ops  # noqa: E402  (circular: ops builds Tensors)
