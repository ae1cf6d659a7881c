"""Numeric core: tensors, tape-based reverse-mode gradients, GRU, loss, optimizer."""

from ihan.core.gradcheck import grad_check
from ihan.core.gru import GRUParams, gru_cell, gru_sequence
from ihan.core.ops import (
    add,
    bce_loss,
    concat_cols,
    masked_softmax,
    matmul,
    mean,
    mul,
    onehot,
    segment_softmax,
    segment_sum,
    sigmoid,
    softmax,
    sub,
    take_columns,
    tanh,
    total,
)
from ihan.core.optim import AdamWState, adamw_step, clip_global_norm
from ihan.core.tensor import Tape, Tensor

__all__ = [
    "AdamWState",
    "GRUParams",
    "Tape",
    "Tensor",
    "adamw_step",
    "add",
    "bce_loss",
    "clip_global_norm",
    "concat_cols",
    "grad_check",
    "gru_cell",
    "gru_sequence",
    "masked_softmax",
    "matmul",
    "mean",
    "mul",
    "onehot",
    "segment_softmax",
    "segment_sum",
    "sigmoid",
    "softmax",
    "sub",
    "take_columns",
    "tanh",
    "total",
]
