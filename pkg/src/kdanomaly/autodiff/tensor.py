"""Dense tensors and the recording tape used for reverse-mode differentiation.

Operations only record themselves while a :class:`Tape` is active::

    with Tape() as tape:
        loss = mse_loss(model(x), target)
    tape.backward(loss)

Outside a tape every op is a plain forward computation.  Storage defaults to
32-bit floats; a tensor created explicitly with ``dtype=np.float64`` keeps
64-bit storage, which the gradient checkers use for finite differencing.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from ..errors import ArgumentError, NumericError, StateError

_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> Optional["Tape"]:
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """n-dimensional float array with optional gradient accumulation."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None, dtype=None):
        if isinstance(data, Tensor):
            arr = data.data
            dtype = arr.dtype if dtype is None else dtype
        else:
            arr = np.asarray(data)
            dtype = np.float32 if dtype is None else dtype
        if arr.dtype != dtype:
            arr = arr.astype(dtype)
        if not np.all(np.isfinite(arr)):
            raise NumericError(f"non-finite values in tensor {name or ''}".rstrip())
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self.frozen = False
        self._node: Optional[Node] = None

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        if self._node is None:
            raise StateError("tensor was not produced under an active tape")
        self._node.tape.backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- operator sugar (implemented in ops) ---------------------------------
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
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import ops
        if isinstance(other, Tensor):
            raise TypeError("division by a tensor is not supported")
        return ops.mul(self, 1.0 / float(other))

    def __neg__(self):
        from . import ops
        return ops.mul(self, -1.0)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def sum(self, axis=None):
        from . import ops
        return ops.sum(self, axis=axis)

    def mean(self):
        from . import ops
        return ops.mean(self)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)


def as_tensor(value, dtype=None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    arr = np.asarray(value)
    if dtype is None:
        dtype = np.float32
    return Tensor(arr, dtype=dtype)


@dataclass
class Node:
    """One recorded operation: inputs, output and its vector-Jacobian rule."""

    op: str
    inputs: tuple
    output: Tensor
    vjp: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]
    tape: "Tape"


@dataclass
class Tape:
    """Ordered record of operations executed while the tape is active.

    Nodes are appended in execution order, so the list is already
    topologically sorted and a reverse sweep visits each node once.
    """

    nodes: list = field(default_factory=list)
    leaves: dict = field(default_factory=dict)
    consumed: bool = False

    def __enter__(self) -> "Tape":
        if self.consumed:
            raise StateError("tape already consumed by backward; create a new one")
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def record(self, op: str, inputs: tuple, output: Tensor, vjp) -> None:
        for t in inputs:
            if t.requires_grad and (t._node is None or t._node.tape is not self):
                self.leaves.setdefault(id(t), t)
        node = Node(op, inputs, output, vjp, self)
        output._node = node
        output.requires_grad = True
        self.nodes.append(node)

    def backward(self, loss: Tensor) -> None:
        if loss.size != 1:
            raise ArgumentError(f"backward needs a scalar loss, got shape {loss.shape}")
        if self.consumed:
            raise StateError("backward already ran on this tape; record a fresh one")
        if loss._node is None or loss._node.tape is not self:
            raise StateError("loss is not connected to this tape")

        grads = {id(loss): np.ones(loss.shape, dtype=np.float64)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            in_grads = node.vjp(g)
            for t, gi in zip(node.inputs, in_grads):
                if gi is None or not t.requires_grad or t.frozen:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        for key, leaf in self.leaves.items():
            g = grads.get(key)
            if g is None:
                g = np.zeros(leaf.shape, dtype=np.float64)
            g = np.asarray(g, dtype=np.float64).reshape(leaf.shape)
            leaf.grad = g.astype(leaf.dtype) if leaf.grad is None else (leaf.grad + g).astype(leaf.dtype)
        self.consumed = True
        for node in self.nodes:
            node.inputs = ()
            node.vjp = None
        self.nodes.clear()


def make_output(op: str, inputs: tuple, data: np.ndarray, vjp, dtype=None) -> Tensor:
    """Wrap ``data`` as the output of ``op`` and record it on the active tape."""
    if dtype is None:
        dtype = np.result_type(*[t.dtype for t in inputs]) if inputs else np.float32
    out = Tensor(data, dtype=dtype)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        tape.record(op, inputs, out, vjp)
    return out
