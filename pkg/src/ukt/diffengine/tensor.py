"""Tensors and the operation tape."""

from __future__ import annotations

import threading
from typing import Callable, Optional, Sequence

import numpy as np

_state = threading.local()
_DEFAULT_DTYPE = [np.dtype(np.float32)]


def set_default_dtype(dtype) -> None:
    """Precision used for new tensors (float32 by default, float64 for gradient checks)."""
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _DEFAULT_DTYPE[0] = dtype


def get_default_dtype() -> np.dtype:
    return _DEFAULT_DTYPE[0]


class default_dtype:
    """Context manager switching the default precision temporarily."""

    def __init__(self, dtype):
        self.dtype = np.dtype(dtype)

    def __enter__(self):
        self._saved = get_default_dtype()
        set_default_dtype(self.dtype)
        return self

    def __exit__(self, *exc):
        set_default_dtype(self._saved)


class Tensor:
    """Dense array node. Leaves with ``requires_grad`` receive ``.grad`` on backward."""

    __slots__ = ("data", "requires_grad", "grad", "tape", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str = ""):
        dtype = np.dtype(dtype) if dtype is not None else None
        if isinstance(data, np.ndarray) and dtype is None and data.dtype in (np.float32, np.float64):
            arr = np.array(data, copy=True, order="C")
        else:
            arr = np.array(data, dtype=dtype or get_default_dtype(), copy=True, order="C")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.tape: Optional[Tape] = None
        self.name = name

    @classmethod
    def _wrap(cls, data: np.ndarray) -> "Tensor":
        # results of ops own their buffers already, so skip the defensive copy
        t = cls.__new__(cls)
        t.data = data
        t.requires_grad = False
        t.grad = None
        t.tape = None
        t.name = ""
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # operator sugar, resolved lazily to avoid an import cycle
    def __add__(self, other):
        from .ops import add
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from .ops import sub
        return sub(self, other)

    def __rsub__(self, other):
        from .ops import sub
        return sub(other, self)

    def __mul__(self, other):
        from .ops import mul
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from .ops import div
        return div(self, other)

    def __neg__(self):
        from .ops import scale
        return scale(self, -1.0)


class _Node:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out, inputs, backward):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; ops evaluated inside record themselves when any
    input requires a gradient. Outside a tape, ops evaluate eagerly with no
    bookkeeping, which is safe to run concurrently.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False

    def __enter__(self):
        stack = getattr(_state, "stack", None)
        if stack is None:
            stack = _state.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _state.stack.pop()

    def __len__(self):
        return len(self.nodes)

    def record(self, out: Tensor, inputs: Sequence[Tensor], backward: Callable) -> None:
        out.tape = self
        out.requires_grad = True
        self.nodes.append(_Node(out, tuple(inputs), backward))

    def backward(self, loss: Tensor) -> dict:
        """Propagate d(loss)/d(.) to every leaf; returns ``{leaf: grad}``.

        Leaf gradients are also accumulated into ``leaf.grad``.
        """
        if loss.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        if self.consumed:
            raise RuntimeError("tape already consumed by a previous backward pass")
        self.consumed = True
        grads = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            for inp, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                if inp.tape is not self:
                    leaves[id(inp)] = inp
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        out = {}
        for key, leaf in leaves.items():
            g = grads[key].astype(leaf.dtype, copy=False)
            leaf.grad = g if leaf.grad is None else leaf.grad + g
            out[leaf] = g
        if loss.tape is None and loss.requires_grad:
            loss.grad = np.ones_like(loss.data)
            out[loss] = loss.grad
        self.nodes.clear()
        return out


def current_tape() -> Optional[Tape]:
    stack = getattr(_state, "stack", None)
    return stack[-1] if stack else None


def backward(loss: Tensor) -> dict:
    """Backpropagate from a scalar produced under a :class:`Tape`."""
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.tape is None:
        if not loss.requires_grad:
            raise ValueError("loss does not depend on any tensor requiring a gradient")
        loss.grad = np.ones_like(loss.data)
        return {loss: loss.grad}
    return loss.tape.backward(loss)
