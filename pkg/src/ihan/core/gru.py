"""Gated recurrent unit.

Two routes compute the same recurrence::

    r  = sigmoid(W_r x + U_r h + b_r)
    z  = sigmoid(W_z x + U_z h + b_z)
    n  = tanh(W_n x + U_n (r * h) + b_n)
    h' = (1 - z) * n + z * h

``gru_cell`` composes tape primitives for one step.  ``gru_sequence`` is a
single fused primitive over many sequences at once with hand-written
backpropagation through time; it is what the model uses.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from ihan.core import ops
from ihan.core.ops import expit
from ihan.core.tensor import Tensor, record
from ihan.errors import DimensionError

GATE_NAMES = ("W_r", "W_z", "W_n", "U_r", "U_z", "U_n", "b_r", "b_z", "b_n")


@dataclass(frozen=True)
class GRUParams:
    W_r: Tensor
    W_z: Tensor
    W_n: Tensor
    U_r: Tensor
    U_z: Tensor
    U_n: Tensor
    b_r: Tensor
    b_z: Tensor
    b_n: Tensor

    def __post_init__(self):
        h, d = self.W_r.shape
        for name in ("W_z", "W_n"):
            if getattr(self, name).shape != (h, d):
                raise DimensionError(f"GRU {name}: expected {(h, d)}, got {getattr(self, name).shape}")
        for name in ("U_r", "U_z", "U_n"):
            if getattr(self, name).shape != (h, h):
                raise DimensionError(f"GRU {name}: expected {(h, h)}, got {getattr(self, name).shape}")
        for name in ("b_r", "b_z", "b_n"):
            if getattr(self, name).shape != (h, 1):
                raise DimensionError(f"GRU {name}: expected {(h, 1)}, got {getattr(self, name).shape}")

    @property
    def input_dim(self) -> int:
        return self.W_r.cols

    @property
    def hidden_dim(self) -> int:
        return self.W_r.rows

    def tensors(self) -> dict[str, Tensor]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def init(cls, input_dim: int, hidden_dim: int, rng: np.random.Generator) -> "GRUParams":
        """Uniform(-1/sqrt(h), 1/sqrt(h)) for every matrix and bias."""
        bound = 1.0 / np.sqrt(hidden_dim)
        shapes = {
            "W_r": (hidden_dim, input_dim),
            "W_z": (hidden_dim, input_dim),
            "W_n": (hidden_dim, input_dim),
            "U_r": (hidden_dim, hidden_dim),
            "U_z": (hidden_dim, hidden_dim),
            "U_n": (hidden_dim, hidden_dim),
            "b_r": (hidden_dim, 1),
            "b_z": (hidden_dim, 1),
            "b_n": (hidden_dim, 1),
        }
        return cls(**{k: Tensor._wrap(rng.uniform(-bound, bound, size=s)) for k, s in shapes.items()})

    @classmethod
    def zeros(cls, input_dim: int, hidden_dim: int) -> "GRUParams":
        return cls(
            **{
                k: Tensor.zeros(hidden_dim, input_dim if k.startswith("W") else hidden_dim if k.startswith("U") else 1)
                for k in GATE_NAMES
            }
        )


def gru_cell(x, h_prev, params: GRUParams) -> Tensor:
    """One GRU step on column vectors (or column batches) built from tape primitives."""
    x, h_prev = ops.as_tensor(x), ops.as_tensor(h_prev)
    if x.rows != params.input_dim:
        raise DimensionError(f"gru_cell: x has {x.rows} rows, GRU input dim is {params.input_dim}")
    if h_prev.rows != params.hidden_dim or h_prev.cols != x.cols:
        raise DimensionError(f"gru_cell: h_prev {h_prev.shape} incompatible with x {x.shape}")
    p = params
    r = ops.sigmoid(ops.add(ops.add(ops.matmul(p.W_r, x), ops.matmul(p.U_r, h_prev)), p.b_r))
    z = ops.sigmoid(ops.add(ops.add(ops.matmul(p.W_z, x), ops.matmul(p.U_z, h_prev)), p.b_z))
    n = ops.tanh(ops.add(ops.add(ops.matmul(p.W_n, x), ops.matmul(p.U_n, ops.mul(r, h_prev))), p.b_n))
    # (1 - z) * n + z * h  ==  n + z * (h - n)
    return ops.add(n, ops.mul(z, ops.sub(h_prev, n)))


def _step_columns(lengths: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
    offsets = np.concatenate([[0], np.cumsum(lengths)[:-1]]).astype(np.intp)
    steps = []
    for t in range(int(lengths.max())):
        active = np.flatnonzero(lengths > t)
        steps.append(offsets[active] + t)
    return offsets, steps


def gru_sequence(x, params: GRUParams, lengths) -> Tensor:
    """Run the GRU over several sequences packed column-wise.

    ``x`` is (d x N) with the columns of sequence 0 first, then sequence 1,
    and so on; ``lengths`` gives each sequence's length (all >= 1, summing to
    N).  Each sequence starts from a zero hidden state.  Returns (h x N) hidden
    states in the same column order.
    """
    x = ops.as_tensor(x)
    lengths = np.asarray(lengths, dtype=np.intp).reshape(-1)
    d, h = params.input_dim, params.hidden_dim
    if x.rows != d:
        raise DimensionError(f"gru_sequence: x has {x.rows} rows, GRU input dim is {d}")
    if lengths.size == 0 or lengths.min() < 1 or lengths.sum() != x.cols:
        raise DimensionError(f"gru_sequence: lengths {lengths.tolist()} do not tile {x.cols} columns")

    p = params
    X = x.data
    W = np.vstack([p.W_r.data, p.W_z.data, p.W_n.data])
    U_rz = np.vstack([p.U_r.data, p.U_z.data])
    U_n = p.U_n.data
    bias = np.vstack([p.b_r.data, p.b_z.data, p.b_n.data])
    gx = W @ X + bias  # 3h x N

    _, steps = _step_columns(lengths)
    N = x.cols
    H = np.zeros((h, N))
    R = np.zeros((h, N))
    Z = np.zeros((h, N))
    Nn = np.zeros((h, N))
    Hprev = np.zeros((h, N))
    for t, cols in enumerate(steps):
        hp = H[:, cols - 1] if t > 0 else np.zeros((h, cols.size))
        g = gx[:, cols]
        rz = expit(g[: 2 * h] + U_rz @ hp)
        r, z = rz[:h], rz[h:]
        n = np.tanh(g[2 * h :] + U_n @ (r * hp))
        H[:, cols] = n + z * (hp - n)
        R[:, cols], Z[:, cols], Nn[:, cols], Hprev[:, cols] = r, z, n, hp

    def backward(dH):
        dH = dH.copy()
        dgx = np.zeros((3 * h, N))
        dU_rz = np.zeros_like(U_rz)
        dU_n = np.zeros_like(U_n)
        for t in range(len(steps) - 1, -1, -1):
            cols = steps[t]
            dh = dH[:, cols]
            r, z, n, hp = R[:, cols], Z[:, cols], Nn[:, cols], Hprev[:, cols]
            dz = dh * (hp - n)
            dn_pre = dh * (1.0 - z) * (1.0 - n * n)
            dhp = dh * z
            rhp = r * hp
            dU_n += dn_pre @ rhp.T
            d_rhp = U_n.T @ dn_pre
            dhp += d_rhp * r
            dr_pre = d_rhp * hp * r * (1.0 - r)
            dz_pre = dz * z * (1.0 - z)
            drz = np.vstack([dr_pre, dz_pre])
            dU_rz += drz @ hp.T
            dhp += U_rz.T @ drz
            dgx[: 2 * h, cols] = drz
            dgx[2 * h :, cols] = dn_pre
            if t > 0:
                dH[:, cols - 1] += dhp
        dW = dgx @ X.T
        dX = W.T @ dgx
        db = dgx.sum(axis=1, keepdims=True)
        return (
            dX,
            dW[:h], dW[h : 2 * h], dW[2 * h :],
            dU_rz[:h], dU_rz[h:], dU_n,
            db[:h], db[h : 2 * h], db[2 * h :],
        )  # fmt: skip

    parents = (x, p.W_r, p.W_z, p.W_n, p.U_r, p.U_z, p.U_n, p.b_r, p.b_z, p.b_n)
    return record(H, parents, backward)
