"""Central finite-difference check of tape gradients."""

from __future__ import annotations

import math
from typing import Callable, Mapping

import numpy as np

from ihan.core.tensor import Tape, Tensor
from ihan.errors import ConfigError, EvaluationError


def _value(f, params) -> float:
    out = f(params)
    val = out.item() if isinstance(out, Tensor) else float(out)
    if not math.isfinite(val):
        raise EvaluationError(f"grad_check: f evaluated to {val}")
    return val


def grad_check(
    f: Callable[[dict[str, Tensor]], Tensor],
    params: Mapping[str, Tensor],
    h: float = 1e-5,
    max_coords: int | None = None,
    seed: int = 0,
) -> float:
    """Max relative error between tape gradients and (f(p+h) - f(p-h)) / 2h.

    ``f`` maps a name->Tensor dict to a 1x1 tensor.  Relative error per
    coordinate uses the denominator max(|analytic|, |numeric|, 1e-8).  With
    ``max_coords`` set, at most that many coordinates per parameter are
    checked, chosen by a seeded generator.
    """
    if not 1e-6 <= h <= 1e-4:
        raise ConfigError(f"grad_check: step h={h} outside [1e-6, 1e-4]")
    params = dict(params)
    with Tape() as tape:
        tape.watch(*params.values())
        out = f(params)
    if not math.isfinite(out.item()):
        raise EvaluationError(f"grad_check: f evaluated to {out.item()}")
    grads = tape.backward(out)

    rng = np.random.default_rng(seed)
    worst = 0.0
    for name, p in params.items():
        analytic = grads[p].data
        coords = np.arange(p.data.size)
        if max_coords is not None and coords.size > max_coords:
            coords = rng.choice(coords, size=max_coords, replace=False)
        base = p.data.copy()
        for flat in coords:
            idx = np.unravel_index(flat, base.shape)
            plus, minus = base.copy(), base.copy()
            plus[idx] += h
            minus[idx] -= h
            fp = _value(f, {**params, name: Tensor._wrap(plus)})
            fm = _value(f, {**params, name: Tensor._wrap(minus)})
            numeric = (fp - fm) / (2.0 * h)
            a = analytic[idx]
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst
