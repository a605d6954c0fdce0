"""Dense tensors with tape-based reverse-mode differentiation.

A :class:`Tensor` wraps a numpy array (float32 by default). Every differentiable
operation in :mod:`cdn.ops` appends a :class:`Node` to the active :class:`Tape`;
:func:`backward` replays the tape in reverse and sums gradients into the leaves.
"""

from __future__ import annotations

import struct
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32


class ShapeError(ValueError):
    """Raised when operand shapes violate an operation's contract."""


class TapeError(RuntimeError):
    """Raised on misuse of the gradient tape (double backward, stale loss)."""


class Tensor:
    """An n-d array with optional gradient.

    Images are NCHW; parameters may be vectors and losses are 0-d.
    Leaf tensors with ``requires_grad`` own a ``grad`` buffer of the same shape.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "_node", "_tape", "_gen")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        if dtype is None:
            dtype = data.dtype if _is_float_array(data) else DEFAULT_DTYPE
        arr = np.asarray(data, dtype=dtype)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self.name = name
        self._node: Node | None = None
        self._tape: Tape | None = None
        self._gen = -1

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return self.data.item()

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def astype(self, dtype) -> "Tensor":
        """Leaf copy in another dtype, keeping ``requires_grad``."""
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad, name=self.name, dtype=dtype)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

    # Operator sugar; definitions live in cdn.ops.
    def __add__(self, other):
        from . import ops
        return ops.add(self, other) if isinstance(other, Tensor) else ops.add_scalar(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other) if isinstance(other, Tensor) else ops.add_scalar(self, -other)

    def __rsub__(self, other):
        from . import ops
        return ops.add_scalar(ops.scale(self, -1.0), other)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other) if isinstance(other, Tensor) else ops.scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops
        return ops.scale(self, -1.0)


def _is_float_array(data) -> bool:
    return isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64)


class Param(Tensor):
    """Trainable leaf tensor carrying a dotted name such as ``iip.blocks.2.conv1.weight``."""

    __slots__ = ()

    def __init__(self, data, name: str = "", dtype=None):
        super().__init__(data, requires_grad=True, name=name, dtype=dtype)


@dataclass
class Node:
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered record of differentiable operations.

    Nodes are appended in execution order, which is a topological order.
    A tape is consumed by :meth:`backward`; recording a new op afterwards
    starts a fresh generation.
    """

    nodes: list[Node] = field(default_factory=list)
    generation: int = 0
    consumed: bool = False

    def record(self, node: Node) -> None:
        if self.consumed:
            self.reset()
        node.output._tape = self
        node.output._gen = self.generation
        self.nodes.append(node)

    def reset(self) -> None:
        self.nodes = []
        self.generation += 1
        self.consumed = False

    def backward(self, loss: Tensor) -> None:
        if loss._tape is not self or loss._gen != self.generation:
            raise TapeError("loss was not produced on the active generation of this tape")
        if self.consumed:
            raise TapeError("backward already called on this tape; reset it first")
        if loss.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            for inp, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                if inp._node is None:
                    inp.grad += gi.reshape(inp.shape)
                else:
                    key = id(inp)
                    prev = grads.get(key)
                    grads[key] = gi if prev is None else prev + gi
        self.nodes = []
        self.consumed = True


_state = threading.local()


def _tape_stack() -> list[Tape]:
    stack = getattr(_state, "tapes", None)
    if stack is None:
        stack = _state.tapes = [Tape()]
        _state.grad_enabled = True
    return stack


def current_tape() -> Tape:
    return _tape_stack()[-1]


def grad_enabled() -> bool:
    _tape_stack()
    return _state.grad_enabled


@contextmanager
def no_grad():
    """Disable recording; ops return plain tensors."""
    _tape_stack()
    prev = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


@contextmanager
def use_tape(tape: Tape | None = None):
    tape = tape or Tape()
    stack = _tape_stack()
    stack.append(tape)
    try:
        yield tape
    finally:
        stack.pop()


def make_output(data: np.ndarray, inputs: tuple[Tensor, ...], backward_fn) -> Tensor:
    """Wrap an op result, recording it on the active tape if any input needs grad."""
    out = Tensor(data, dtype=data.dtype)
    if grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._node = Node(inputs, out, backward_fn)
        current_tape().record(out._node)
    return out


def backward(loss: Tensor, params: Iterable[Tensor] | None = None) -> None:
    """Populate ``grad`` of every leaf reachable from ``loss``.

    When ``params`` is given their grads are reset to zero first, so
    unreachable parameters end with an all-zero gradient.
    """
    if params is not None:
        for p in params:
            p.zero_grad()
    if loss._tape is None:
        raise TapeError("loss does not depend on any tensor requiring grad")
    loss._tape.backward(loss)


# --- binary dump format ------------------------------------------------------

TENSOR_MAGIC = b"CDNT"
TENSOR_VERSION = 1


def shape4(shape: tuple[int, ...]) -> tuple[int, int, int, int]:
    """Left-pad a shape of rank <= 4 with ones."""
    if len(shape) > 4:
        raise ShapeError(f"cannot frame rank-{len(shape)} tensor in 4 dims")
    return (1,) * (4 - len(shape)) + tuple(int(s) for s in shape)


def write_tensor_frame(fh, arr: np.ndarray) -> None:
    fh.write(struct.pack("<4I", *shape4(arr.shape)))
    fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_tensor_frame(fh) -> np.ndarray:
    head = fh.read(16)
    if len(head) != 16:
        raise ValueError("truncated tensor header")
    shape = struct.unpack("<4I", head)
    count = int(np.prod(shape))
    raw = fh.read(4 * count)
    if len(raw) != 4 * count:
        raise ValueError("truncated tensor payload")
    return np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(shape)


def dump_tensor(t: Tensor | np.ndarray, path: str | Path) -> None:
    arr = t.data if isinstance(t, Tensor) else t
    with open(path, "wb") as fh:
        fh.write(TENSOR_MAGIC)
        fh.write(struct.pack("<I", TENSOR_VERSION))
        write_tensor_frame(fh, arr)


def load_tensor(path: str | Path) -> Tensor:
    with open(path, "rb") as fh:
        if fh.read(4) != TENSOR_MAGIC:
            raise ValueError(f"{path}: not a CDNT tensor dump")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != TENSOR_VERSION:
            raise ValueError(f"{path}: unsupported tensor dump version {version}")
        return Tensor(read_tensor_frame(fh))
