"""Tensor value type and the reverse-mode tape."""

from __future__ import annotations

import threading
from typing import Callable, Optional, Sequence

import numpy as np

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]

_state = threading.local()


def _stack() -> list:
    stack = getattr(_state, "tapes", None)
    if stack is None:
        stack = _state.tapes = []
    return stack


def active_tape() -> Optional["Tape"]:
    stack = _stack()
    return stack[-1] if stack else None


class UsageError(RuntimeError):
    """Raised when the tape is driven incorrectly (e.g. backward on a non-scalar)."""


class Tape:
    """Ordered record of executed operations.

    Operations are only recorded while a tape is active (``with Tape() as tape:``)
    and at least one input requires a gradient; outside a tape every op is a plain
    forward computation.  A tape is single-owner: do not share it across threads.
    """

    def __init__(self) -> None:
        self.nodes: list[tuple[tuple["Tensor", ...], BackwardFn]] = []

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _stack().pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, out: "Tensor", inputs: tuple["Tensor", ...], backward: BackwardFn) -> None:
        out.node_id = len(self.nodes)
        out._tape = self
        self.nodes.append((inputs, backward))

    def backward(self, loss: "Tensor", grad: Optional[np.ndarray] = None) -> None:
        """Populate ``.grad`` of every leaf reachable from ``loss``.

        Nodes are visited once each, in reverse execution order.
        """
        if grad is None:
            if loss.data.size != 1:
                raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
            grad = np.ones_like(loss.data)
        if loss._tape is not self:
            if loss.requires_grad:
                _accumulate_leaf(loss, grad)
            return
        pending: dict[int, np.ndarray] = {loss.node_id: np.asarray(grad, dtype=loss.dtype)}
        for nid in range(loss.node_id, -1, -1):
            g = pending.pop(nid, None)
            if g is None:
                continue
            inputs, fn = self.nodes[nid]
            for inp, gi in zip(inputs, fn(g)):
                if gi is None or not inp.requires_grad:
                    continue
                if inp._tape is self and inp.node_id is not None:
                    prev = pending.get(inp.node_id)
                    pending[inp.node_id] = gi if prev is None else prev + gi
                else:
                    _accumulate_leaf(inp, gi)


def _accumulate_leaf(t: "Tensor", g: np.ndarray) -> None:
    g = np.asarray(g, dtype=t.dtype).reshape(t.shape)
    t.grad = g.copy() if t.grad is None else t.grad + g


class Tensor:
    """Dense real array with an optional gradient and tape linkage."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None) -> None:
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.node_id: Optional[int] = None
        self._tape: Optional[Tape] = None

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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        backward(self, grad)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # operator sugar; implementations live in ops
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    def __radd__(self, other):
        from . import ops
        return ops.add(other, self)

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    def __rmul__(self, other):
        from . import ops
        return ops.mul(other, self)

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __rtruediv__(self, other):
        from . import ops
        return ops.div(other, self)

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def __pow__(self, exponent: float):
        from . import ops
        return ops.power(self, exponent)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __getitem__(self, index):
        from . import ops
        return ops.getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        from . import ops
        return ops.sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        from . import ops
        return ops.mean(self, axis, keepdims)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes):
        from . import ops
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return ops.transpose(self, axes)


def as_tensor(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype), dtype=dtype)


def make_result(data: np.ndarray, inputs: tuple[Tensor, ...], backward_fn: BackwardFn) -> Tensor:
    """Wrap an op's output and record it on the active tape when needed."""
    out = Tensor(data, dtype=data.dtype)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(out, inputs, backward_fn)
    return out


def backward(loss: Tensor, grad: Optional[np.ndarray] = None) -> None:
    """Run reverse-mode accumulation from ``loss`` on the tape that produced it."""
    if grad is None and loss.data.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._tape is None:
        if not loss.requires_grad:
            raise UsageError("loss was not recorded on a tape and does not require grad")
        _accumulate_leaf(loss, np.ones_like(loss.data) if grad is None else grad)
        return
    loss._tape.backward(loss, grad)
