"""Dense tensors and the reverse-mode tape.

A :class:`Tensor` is a thin wrapper over a numpy array restricted to three
dtypes (``f32``, ``f64``, ``u8``). Differentiable primitives live in
:mod:`segkit.ops`; when a :class:`Tape` is active they append a
:class:`Node` to it, and :meth:`Tape.backward` walks the nodes in reverse.

    >>> with Tape() as tape:
    ...     y = ops.sum(ops.mul(x, x))
    >>> grads = tape.backward(y)
"""

from __future__ import annotations

import contextvars
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import DimensionError, DTypeError, UsageError

DTYPES = {"f32": np.dtype(np.float32), "f64": np.dtype(np.float64), "u8": np.dtype(np.uint8)}
_NAMES = {v: k for k, v in DTYPES.items()}
DTYPE_CODES = {"f32": 0, "f64": 1, "u8": 2}


def dtype_name(dt) -> str:
    try:
        return _NAMES[np.dtype(dt)]
    except KeyError:
        raise DTypeError(f"unsupported dtype {np.dtype(dt)}; expected one of f32, f64, u8") from None


class Tensor:
    """Dense row-major array with optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "grad", "name", "__weakref__")

    def __init__(self, data, dtype: str | None = None, requires_grad: bool = False, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is not None:
            if dtype not in DTYPES:
                raise DTypeError(f"unsupported dtype {dtype!r}")
            arr = np.ascontiguousarray(data, dtype=DTYPES[dtype])
        else:
            arr = np.asarray(data)
            if arr.dtype not in _NAMES:
                arr = arr.astype(np.float64)
            arr = np.ascontiguousarray(arr)
        if any(d < 1 for d in arr.shape):
            raise DimensionError(f"all dimension sizes must be >= 1, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> str:
        return _NAMES[self.data.dtype]

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return self.data.item()

    def astype(self, dtype: str) -> "Tensor":
        return Tensor(self.data.astype(DTYPES[dtype]), requires_grad=self.requires_grad, name=self.name)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={list(self.shape)}, dtype={self.dtype}{flag})"

    # arithmetic sugar; the implementations live in ops
    def __add__(self, other):
        from . import ops

        return ops.add(self, other)

    def __mul__(self, other):
        from . import ops

        return ops.mul(self, other)

    def sum(self):
        from . import ops

        return ops.sum(self)


def as_tensor(x, dtype: str | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def check_same_dtype(*tensors: Tensor) -> str:
    names = {t.dtype for t in tensors}
    if len(names) != 1:
        raise DTypeError(f"dtype mismatch: {sorted(names)}")
    return names.pop()


@dataclass
class Node:
    """One recorded primitive application."""

    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    saved: dict = field(default_factory=dict)


_ACTIVE: contextvars.ContextVar[Tape | None] = contextvars.ContextVar("segkit_tape", default=None)


class Tape:
    """Ordered record of primitive applications.

    Use as a context manager; ops executed inside the ``with`` block are
    recorded when at least one of their inputs requires a gradient.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE.set(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.reset(self._token)
        self._token = None
        return False

    def record(self, node: Node) -> None:
        self.nodes.append(node)

    def backward(self, loss: Tensor) -> dict[Tensor, np.ndarray]:
        """Propagate d(loss)/d(.) to every leaf that requires a gradient.

        Returns a mapping leaf tensor -> gradient array and also stores each
        gradient on ``leaf.grad``.
        """
        if loss.size != 1:
            raise UsageError(f"backward needs a scalar loss, got shape {list(loss.shape)}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        produced = {id(n.output) for n in self.nodes}
        leaves: dict[int, Tensor] = {}
        if loss.requires_grad and id(loss) not in produced:
            leaves[id(loss)] = loss
        for node in reversed(self.nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            in_grads = node.backward(g)
            for inp, ig in zip(node.inputs, in_grads):
                if ig is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + ig
                else:
                    grads[key] = ig
                if key not in produced:
                    leaves[key] = inp
        out = {}
        for key, t in leaves.items():
            g = grads.get(key)
            if g is None:
                g = np.zeros_like(t.data)
            g = np.asarray(g, dtype=t.data.dtype).reshape(t.shape)
            t.grad = g
            out[t] = g
        return out


def active_tape() -> Tape | None:
    return _ACTIVE.get()


def record(op: str, inputs: Sequence[Tensor], out: Tensor, backward, **saved) -> Tensor:
    """Attach ``out`` to the active tape if any input is tracked."""
    tape = _ACTIVE.get()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(Node(op, tuple(inputs), out, backward, saved))
    return out
