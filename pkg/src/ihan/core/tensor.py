"""2-D float64 tensors and the define-by-run tape used for reverse-mode gradients.

A :class:`Tensor` is an immutable value.  Operations in :mod:`ihan.core.ops`
record themselves on the active :class:`Tape` whenever one of their operands
is tracked by it (a watched leaf or the output of an earlier recorded node).
Outside a tape, the same operations are plain numeric functions.
"""

from __future__ import annotations

import contextvars
from typing import Callable, Iterable, Sequence

import numpy as np

from ihan.errors import DimensionError

_ACTIVE_TAPE: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar("ihan_tape", default=None)


class Tensor:
    """Dense, read-only 2-D array of 64-bit floats."""

    __slots__ = ("data", "__weakref__")

    def __init__(self, data):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        if arr.ndim != 2:
            raise DimensionError(f"Tensor must be 2-D, got shape {arr.shape}")
        arr.setflags(write=False)
        self.data = arr

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        # no copy; caller hands over ownership
        t = object.__new__(cls)
        if arr.dtype != np.float64:
            arr = arr.astype(np.float64)
        arr.setflags(write=False)
        t.data = arr
        return t

    @classmethod
    def zeros(cls, rows: int, cols: int) -> "Tensor":
        return cls._wrap(np.zeros((rows, cols)))

    @classmethod
    def scalar(cls, value: float) -> "Tensor":
        return cls._wrap(np.array([[float(value)]]))

    @classmethod
    def row(cls, values: Iterable[float]) -> "Tensor":
        return cls._wrap(np.asarray(list(values), dtype=np.float64).reshape(1, -1))

    @classmethod
    def col(cls, values: Iterable[float]) -> "Tensor":
        return cls._wrap(np.asarray(list(values), dtype=np.float64).reshape(-1, 1))

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape  # type: ignore[return-value]

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.data[0, 0])

    def numpy(self) -> np.ndarray:
        """Read-only view of the underlying array."""
        return self.data

    def __repr__(self) -> str:
        return f"Tensor({self.rows}x{self.cols})"

    # operator sugar; the ops module does the real work
    def __matmul__(self, other):
        from ihan.core import ops

        return ops.matmul(self, other)

    def __add__(self, other):
        from ihan.core import ops

        return ops.add(self, other)

    def __sub__(self, other):
        from ihan.core import ops

        return ops.sub(self, other)

    def __mul__(self, other):
        from ihan.core import ops

        return ops.mul(self, other)

    def __neg__(self):
        from ihan.core import ops

        return ops.neg(self)

    @property
    def T(self) -> "Tensor":
        from ihan.core import ops

        return ops.transpose(self)


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Node:
    """One recorded primitive: output, operands, and its gradient rule."""

    __slots__ = ("out", "parents", "backward")

    def __init__(self, out: Tensor, parents: tuple[Tensor, ...], backward: BackwardFn):
        self.out = out
        self.parents = parents
        self.backward = backward


class Tape:
    """Ordered record of primitive operations, rebuilt per forward pass.

    Usage::

        with Tape() as tape:
            tape.watch(w)
            loss = ops.sum(ops.mul(w, w))
        grads = tape.backward(loss)   # {w: Tensor}
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self._tracked: set[int] = set()
        self._leaves: list[Tensor] = []
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPE.reset(self._token)
        self._token = None

    def watch(self, *tensors: Tensor) -> None:
        for t in tensors:
            if id(t) not in self._tracked:
                self._tracked.add(id(t))
                self._leaves.append(t)

    def tracks(self, t: Tensor) -> bool:
        return id(t) in self._tracked

    def record(self, out: Tensor, parents: tuple[Tensor, ...], backward: BackwardFn) -> None:
        self.nodes.append(Node(out, parents, backward))
        self._tracked.add(id(out))

    def backward(self, output: Tensor) -> dict[Tensor, Tensor]:
        """Propagate d(output)/d(.) to every watched leaf.

        ``output`` must be 1x1.  Every watched leaf gets an entry, zero if it
        did not influence the output.
        """
        if output.data.size != 1:
            raise DimensionError(f"backward() needs a 1x1 output, got {output.shape}")
        grads: dict[int, np.ndarray] = {id(output): np.ones((1, 1))}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            parent_grads = node.backward(g)
            for parent, pg in zip(node.parents, parent_grads):
                if pg is None or id(parent) not in self._tracked:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        result = {}
        for leaf in self._leaves:
            g = grads.get(id(leaf))
            if g is None:
                g = np.zeros(leaf.shape)
            result[leaf] = Tensor._wrap(np.array(g, dtype=np.float64, copy=True))
        return result


def active_tape() -> Tape | None:
    return _ACTIVE_TAPE.get()


def record(out_arr: np.ndarray, parents: tuple[Tensor, ...], backward: BackwardFn) -> Tensor:
    """Wrap ``out_arr`` and record it on the active tape if any parent is tracked."""
    out = Tensor._wrap(out_arr)
    tape = _ACTIVE_TAPE.get()
    if tape is not None and any(id(p) in tape._tracked for p in parents):
        tape.record(out, parents, backward)
    return out
