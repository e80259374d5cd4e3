"""Dense tensors recorded on a reverse-mode gradient tape.

A ``Tensor`` wraps a numpy array plus an optional gradient buffer. All
differentiable operations (see :mod:`dtp.diffcore.ops`) record a node on
the active :class:`Tape`; nodes are appended in execution order, which is
already a topological order, so ``backward`` is a single reverse sweep.

Default precision is 32-bit. Gradient checks switch to 64-bit through the
``precision`` context manager.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterator, Sequence

import numpy as np

from ..errors import ContractError, StateError

_DEFAULT_DTYPE = np.dtype(np.float32)
_DEBUG_CHECKS = False
_ACTIVE_TAPE: "Tape | None" = None


def default_dtype() -> np.dtype:
    return _DEFAULT_DTYPE


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ContractError(f"unsupported dtype {dtype}; use float32 or float64")
    _DEFAULT_DTYPE = dtype


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily switch the default dtype (64-bit mode for grad checks)."""
    global _DEFAULT_DTYPE
    saved = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _DEFAULT_DTYPE = saved


def set_debug_checks(enabled: bool) -> None:
    """Toggle finiteness checks on every operation output."""
    global _DEBUG_CHECKS
    _DEBUG_CHECKS = bool(enabled)


class Tensor:
    """N-dimensional array with an optional gradient buffer.

    ``data`` is always a contiguous numpy float array. ``grad`` is lazily
    allocated with the same shape on first accumulation. ``tape_id`` is
    the index of the node that produced this tensor on the active tape,
    or None for leaves and eval-mode results.
    """

    __slots__ = ("data", "requires_grad", "grad", "tape_id")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=np.dtype(dtype) if dtype else _DEFAULT_DTYPE)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        if not np.all(np.isfinite(arr)):
            raise ContractError("tensor values must be finite (got NaN or Inf)")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.tape_id: int | None = None

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool = False) -> "Tensor":
        # Fast path for op outputs; finiteness is only checked in debug mode.
        if _DEBUG_CHECKS and not np.all(np.isfinite(arr)):
            raise ContractError("operation produced non-finite values")
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = requires_grad
        t.grad = None
        t.tape_id = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        """Same values, severed from the tape."""
        return Tensor._wrap(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray, owned: bool = False) -> None:
        """Add a gradient contribution.

        ``owned`` promises g is a fresh array no one else references, so
        it can be adopted without copying on first accumulation.
        """
        if self.grad is None:
            if owned and g.dtype == self.data.dtype and g.flags["C_CONTIGUOUS"]:
                self.grad = g
            else:
                self.grad = np.array(g, dtype=self.data.dtype)
        else:
            self.grad += g

    # Operator sugar; the functional forms live in dtp.diffcore.ops.
    def __add__(self, other):
        from . import ops
        return ops.elementwise("add", self, other)

    def __sub__(self, other):
        from . import ops
        return ops.elementwise("sub", self, other)

    def __mul__(self, other):
        from . import ops
        return ops.elementwise("mul", self, other)

    __radd__ = __add__
    __rmul__ = __mul__

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"


class _Node:
    __slots__ = ("inputs", "out", "rule")

    def __init__(self, inputs: tuple[Tensor, ...], out: Tensor, rule: Callable[[np.ndarray], None]):
        self.inputs = inputs
        self.out = out
        self.rule = rule


class Tape:
    """Append-only record of operations, replayed backwards once."""

    __slots__ = ("nodes", "frozen")

    def __init__(self):
        self.nodes: list[_Node] = []
        self.frozen = False

    def record(self, inputs: Sequence[Tensor], out: Tensor, rule: Callable[[np.ndarray], None]) -> None:
        if self.frozen:
            raise StateError("tape is frozen; call reset() before recording new operations")
        out.tape_id = len(self.nodes)
        self.nodes.append(_Node(tuple(inputs), out, rule))

    def reset(self) -> None:
        self.nodes.clear()
        self.frozen = False

    def __len__(self) -> int:
        return len(self.nodes)


def active_tape() -> Tape | None:
    return _ACTIVE_TAPE


@contextlib.contextmanager
def use_tape(tape: Tape | None) -> Iterator[Tape | None]:
    """Make ``tape`` the recording target (None disables recording)."""
    global _ACTIVE_TAPE
    saved = _ACTIVE_TAPE
    _ACTIVE_TAPE = tape
    try:
        yield tape
    finally:
        _ACTIVE_TAPE = saved


def no_grad():
    return use_tape(None)


def record(inputs: Sequence[Tensor], out_data: np.ndarray, rule: Callable[[np.ndarray], None]) -> Tensor:
    """Wrap an op result, recording a backward rule if grads are needed."""
    tape = _ACTIVE_TAPE
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor._wrap(out_data, requires_grad=needs)
    if needs:
        tape.record([t for t in inputs if t.requires_grad], out, rule)
    return out


def backward(loss: Tensor) -> None:
    """Populate gradients of every requires_grad leaf reachable from ``loss``.

    The active tape is frozen afterwards; reset it before the next step.
    """
    tape = _ACTIVE_TAPE
    if tape is None:
        raise StateError("backward() requires an active tape")
    if tape.frozen:
        raise StateError("tape already replayed; reset() it before calling backward again")
    if loss.data.size != 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad or loss.tape_id is None:
        raise ContractError("loss is not recorded on the active tape")

    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape.nodes):
        if node.out.grad is not None:
            node.rule(node.out.grad)
    # Leaves that never received a contribution still get a zero buffer.
    for node in tape.nodes:
        for t in node.inputs:
            if t.grad is None:
                t.grad = np.zeros_like(t.data)
    tape.frozen = True
