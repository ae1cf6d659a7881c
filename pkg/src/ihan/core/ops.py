"""Differentiable primitives over :class:`~ihan.core.tensor.Tensor`.

Elementwise binary ops broadcast 1x1, 1xn and mx1 operands the way numpy does;
gradients are summed back onto the broadcast axes.

Segment ops (``segment_sum``, ``segment_softmax``) operate on columns grouped
by a sorted, non-negative segment id per column.  They let a whole mini-batch
of variable-length patients flow through one tape without padding.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from ihan.core.tensor import Tensor, record
from ihan.errors import DegenerateInputError, DimensionError

BCE_EPS = 1e-12


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    if shape[0] == 1 and grad.shape[0] != 1:
        grad = grad.sum(axis=0, keepdims=True)
    if shape[1] == 1 and grad.shape[1] != 1:
        grad = grad.sum(axis=1, keepdims=True)
    return grad


def _check_broadcast(a: Tensor, b: Tensor, name: str) -> None:
    for da, db in zip(a.shape, b.shape):
        if da != db and da != 1 and db != 1:
            raise DimensionError(f"{name}: cannot broadcast {a.shape} with {b.shape}")


def expit(x: np.ndarray) -> np.ndarray:
    """Logistic sigmoid without overflow for large |x|."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.cols != b.rows:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    A, B = a.data, b.data

    def backward(g):
        return g @ B.T, A.T @ g

    return record(A @ B, (a, b), backward)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return record(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return record(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    A, B = a.data, b.data

    def backward(g):
        return _unbroadcast(g * B, A.shape), _unbroadcast(g * A, B.shape)

    return record(A * B, (a, b), backward)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return record(-a.data, (a,), lambda g: (-g,))


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return record(a.data * c, (a,), lambda g: (g * c,))


def transpose(a) -> Tensor:
    a = as_tensor(a)
    return record(np.ascontiguousarray(a.data.T), (a,), lambda g: (g.T,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    y = expit(a.data)
    return record(y, (a,), lambda g: (g * y * (1.0 - y),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.data)
    return record(y, (a,), lambda g: (g * (1.0 - y * y),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    y = np.exp(a.data)
    return record(y, (a,), lambda g: (g * y,))


def log(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    return record(np.log(x), (a,), lambda g: (g / x,))


def total(a) -> Tensor:
    """Sum of all entries, as a 1x1 tensor."""
    a = as_tensor(a)
    shape = a.shape
    return record(np.array([[a.data.sum()]]), (a,), lambda g: (np.full(shape, g[0, 0]),))


def mean(a) -> Tensor:
    a = as_tensor(a)
    n = a.data.size
    return scale(total(a), 1.0 / n)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    rows = {p.rows for p in parts}
    if len(rows) != 1:
        raise DimensionError(f"concat_cols: row counts differ {[p.shape for p in parts]}")
    bounds = np.cumsum([0] + [p.cols for p in parts])

    def backward(g):
        return tuple(g[:, bounds[i] : bounds[i + 1]] for i in range(len(parts)))

    return record(np.concatenate([p.data for p in parts], axis=1), tuple(parts), backward)


def take_columns(a, index) -> Tensor:
    """Gather columns ``a[:, index]``; gradient scatters back (repeats accumulate)."""
    a = as_tensor(a)
    idx = np.asarray(index, dtype=np.intp)
    if idx.ndim != 1:
        raise DimensionError("take_columns: index must be 1-D")
    if idx.size and (idx.min() < 0 or idx.max() >= a.cols):
        raise DimensionError(f"take_columns: index out of range for {a.shape}")
    shape = a.shape

    def backward(g):
        out = np.zeros(shape)
        np.add.at(out.T, idx, g.T)
        return (out,)

    return record(a.data[:, idx], (a,), backward)


def onehot(index: int, size: int) -> Tensor:
    if not 0 <= index < size:
        raise DimensionError(f"onehot: index {index} outside 0..{size - 1}")
    v = np.zeros((size, 1))
    v[index, 0] = 1.0
    return Tensor._wrap(v)


def masked_softmax(scores, mask) -> Tensor:
    """Softmax of a 1xn row over positions where ``mask`` is true; others are exactly 0."""
    scores = as_tensor(scores)
    mask = np.asarray(mask, dtype=bool).reshape(-1)
    if scores.rows != 1 or scores.cols != mask.size:
        raise DimensionError(f"masked_softmax: scores {scores.shape} vs mask length {mask.size}")
    if not mask.any():
        raise DegenerateInputError("masked_softmax: mask has no true entry")
    s = scores.data[0]
    top = s[mask].max()
    e = np.zeros_like(s)
    e[mask] = np.exp(s[mask] - top)
    y = (e / e.sum()).reshape(1, -1)

    def backward(g):
        return (y * (g - (g * y).sum()),)

    return record(y, (scores,), backward)


def softmax(scores) -> Tensor:
    scores = as_tensor(scores)
    return masked_softmax(scores, np.ones(scores.cols, dtype=bool))


def _segment_starts(segments: np.ndarray, n_segments: int, n_cols: int) -> np.ndarray:
    if segments.ndim != 1 or segments.size != n_cols:
        raise DimensionError(f"segment ids: expected {n_cols} ids, got shape {segments.shape}")
    if n_cols == 0:
        raise DegenerateInputError("segment op on zero columns")
    if np.any(np.diff(segments) < 0):
        raise ValueError("segment ids must be sorted")
    starts = np.searchsorted(segments, np.arange(n_segments), side="left")
    ends = np.searchsorted(segments, np.arange(n_segments), side="right")
    if np.any(ends == starts) or segments[-1] >= n_segments or segments[0] < 0:
        raise DegenerateInputError("every segment needs at least one column")
    return starts


def segment_sum(a, segments, n_segments: int) -> Tensor:
    """Sum columns sharing a segment id: (d x N) -> (d x n_segments)."""
    a = as_tensor(a)
    seg = np.asarray(segments, dtype=np.intp)
    starts = _segment_starts(seg, n_segments, a.cols)
    out = np.add.reduceat(a.data, starts, axis=1)
    return record(out, (a,), lambda g: (g[:, seg],))


def segment_softmax(scores, segments, n_segments: int) -> Tensor:
    """Independent softmax within each segment of a 1xN score row."""
    scores = as_tensor(scores)
    if scores.rows != 1:
        raise DimensionError(f"segment_softmax: expected a 1xN row, got {scores.shape}")
    seg = np.asarray(segments, dtype=np.intp)
    starts = _segment_starts(seg, n_segments, scores.cols)
    s = scores.data[0]
    top = np.maximum.reduceat(s, starts)
    e = np.exp(s - top[seg])
    y = (e / np.add.reduceat(e, starts)[seg]).reshape(1, -1)

    def backward(g):
        gy = (g * y)[0]
        return (y * (g - np.add.reduceat(gy, starts)[seg]),)

    return record(y, (scores,), backward)


def bce_loss(y_hat, y) -> Tensor:
    """Mean binary cross-entropy of predictions in (0,1); ``y_hat`` clamped to [eps, 1-eps]."""
    y_hat = as_tensor(y_hat)
    target = np.asarray(y, dtype=np.float64).reshape(y_hat.shape)
    p = y_hat.data
    pc = np.clip(p, BCE_EPS, 1.0 - BCE_EPS)
    n = p.size
    loss = -(target * np.log(pc) + (1.0 - target) * np.log1p(-pc)).sum() / n
    inside = (p >= BCE_EPS) & (p <= 1.0 - BCE_EPS)

    def backward(g):
        d = (-(target / pc) + (1.0 - target) / (1.0 - pc)) / n
        return (g[0, 0] * d * inside,)

    return record(np.array([[loss]]), (y_hat,), backward)
