"""Dense f64 tensors and the tape that records operations on them.

A :class:`Tape` is activated with a ``with`` block.  Operations executed
while a tape is active, on inputs that require gradients, append a node to
the tape.  ``tape.backward(loss)`` then walks the nodes in reverse and
accumulates ``.grad`` on every leaf tensor that requires gradients.

Outside of a tape the same operations run as plain numpy (inference mode).
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class TapeError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_node")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise NonFiniteError(f"non-finite entries in tensor {name or ''}".rstrip())
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._node: int | None = None

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.grad = None
        t.requires_grad = False
        t.name = None
        t._node = None
        return t

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
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # operator sugar; the functions in ``ops`` do the work
    def __add__(self, other):
        from . import ops

        return ops.add(self, as_tensor(other))

    def __radd__(self, other):
        from . import ops

        return ops.add(as_tensor(other), self)

    def __sub__(self, other):
        from . import ops

        return ops.sub(self, as_tensor(other))

    def __rsub__(self, other):
        from . import ops

        return ops.sub(as_tensor(other), self)

    def __mul__(self, other):
        from . import ops

        if isinstance(other, (int, float)):
            return ops.scale(self, float(other))
        return ops.mul(self, as_tensor(other))

    __rmul__ = __mul__

    def __truediv__(self, other: float):
        from . import ops

        return ops.scale(self, 1.0 / float(other))

    def __neg__(self):
        from . import ops

        return ops.scale(self, -1.0)

    def __matmul__(self, other):
        from . import ops

        return ops.matmul(self, as_tensor(other))


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(x) -> Tensor:
    """A tensor that never receives gradients."""
    return Tensor(x, requires_grad=False)


@dataclass
class Node:
    kind: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


_state = threading.local()


def active_tape() -> "Tape | None":
    stack = getattr(_state, "stack", None)
    return stack[-1] if stack else None


class Tape:
    """Append-only record of differentiable operations."""

    def __init__(self):
        self.nodes: list[Node] = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        if not hasattr(_state, "stack"):
            _state.stack = []
        _state.stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _state.stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, kind: str, inputs: tuple[Tensor, ...], output: Tensor, vjp) -> None:
        if self._consumed:
            raise TapeError("tape already used for a backward pass; start a new one")
        for t in inputs:
            if t._node is not None and (
                t._node >= len(self.nodes) or self.nodes[t._node].output is not t
            ):
                raise TapeError(f"input of {kind} was recorded on a different tape")
        output._node = len(self.nodes)
        output.requires_grad = True
        self.nodes.append(Node(kind, inputs, output, vjp))

    def backward(self, loss: Tensor, seed: np.ndarray | None = None) -> None:
        """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every leaf on the tape."""
        if self._consumed:
            raise TapeError("backward already called on this tape")
        if (
            loss._node is None
            or loss._node >= len(self.nodes)
            or self.nodes[loss._node].output is not loss
        ):
            raise TapeError("loss was not produced on this tape")
        if seed is None:
            if loss.size != 1:
                raise ShapeError(f"backward needs a scalar loss or an explicit seed, got {loss.shape}")
            seed = np.ones_like(loss.data)
        self._consumed = True
        grads: dict[int, np.ndarray] = {loss._node: np.asarray(seed, dtype=np.float64)}
        for idx in range(loss._node, -1, -1):
            g = grads.pop(idx, None)
            if g is None:
                continue
            node = self.nodes[idx]
            in_grads = node.vjp(g)
            for t, ig in zip(node.inputs, in_grads):
                if ig is None or not t.requires_grad:
                    continue
                if t._node is None:
                    t.grad = ig.copy() if t.grad is None else t.grad + ig
                elif t._node in grads:
                    grads[t._node] = grads[t._node] + ig
                else:
                    grads[t._node] = ig


def make(kind: str, out: np.ndarray, inputs: tuple[Tensor, ...], vjp) -> Tensor:
    """Wrap ``out`` and record it on the active tape when any input needs gradients."""
    if not np.isfinite(out).all():
        raise NonFiniteError(f"{kind} produced non-finite values")
    t = Tensor._wrap(out)
    tape = active_tape()
    if tape is not None and any(i.requires_grad for i in inputs):
        tape.record(kind, inputs, t, vjp)
    return t
