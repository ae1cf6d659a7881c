"""AdamW with decoupled weight decay, plus global-norm gradient clipping."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from ihan.core.tensor import Tensor
from ihan.errors import DimensionError


@dataclass
class AdamWState:
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def clone(self) -> "AdamWState":
        return copy.deepcopy(self)


def _array(g) -> np.ndarray:
    return g.data if isinstance(g, Tensor) else np.asarray(g, dtype=np.float64)


def adamw_step(
    params: Mapping[str, Tensor], grads: Mapping[str, Tensor | np.ndarray], state: AdamWState
) -> dict[str, Tensor]:
    """Return updated parameters; ``state`` moments and step counter advance in place.

    theta <- theta * (1 - lr * wd) - lr * m_hat / (sqrt(v_hat) + eps)
    """
    for name, p in params.items():
        g = _array(grads[name])
        if g.shape != p.shape:
            raise DimensionError(f"adamw_step: grad for {name!r} has shape {g.shape}, param {p.shape}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    decay = 1.0 - state.lr * state.weight_decay
    out = {}
    for name, p in params.items():
        g = _array(grads[name])
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros(p.shape)
            v = np.zeros(p.shape)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.m[name], state.v[name] = m, v
        m_hat = m / c1
        v_hat = v / c2
        out[name] = Tensor._wrap(p.data * decay - state.lr * m_hat / (np.sqrt(v_hat) + state.eps))
    return out


def global_norm(grads: Mapping[str, Tensor | np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(_array(g) ** 2)) for g in grads.values())))


def clip_global_norm(grads: Mapping[str, Tensor | np.ndarray], max_norm: float | None) -> dict[str, np.ndarray]:
    """Scale all gradients by ``max_norm / norm`` when the joint L2 norm exceeds ``max_norm``."""
    arrays = {k: _array(g) for k, g in grads.items()}
    if not max_norm:
        return arrays
    norm = global_norm(arrays)
    if norm <= max_norm:
        return arrays
    factor = max_norm / norm
    return {k: g * factor for k, g in arrays.items()}
