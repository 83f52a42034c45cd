from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from ..errors import EvaluationError
from .params import ParamStore
from .tensor import Tensor

FD_STEP = 1e-5
# Relative error of a tensor is ||a - n|| / max(||a||, ||n||, REL_FLOOR) over
# the checked coordinates. Per-coordinate ratios are not used: a coordinate
# whose gradient is far below the loss's round-off scale would fail on noise.
REL_FLOOR = 1e-6


@dataclass
class GradCheckReport:
    errors: dict[str, float]
    tolerance: float

    @property
    def passed(self) -> bool:
        return all(e < self.tolerance for e in self.errors.values())

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)


def _value(loss_fn, params) -> float:
    out = loss_fn(params)
    v = out.item() if isinstance(out, Tensor) else float(out)
    if not np.isfinite(v):
        raise EvaluationError(f"loss evaluated to {v}")
    return v


def finite_difference_check(
    loss_fn: Callable[[ParamStore], Tensor],
    params: ParamStore,
    tolerance: float = 1e-4,
    max_coords: int = 64,
    seed: int = 0,
) -> GradCheckReport:
    """Compare backprop gradients with central differences.

    Tensors with more than ``max_coords`` entries are checked on a seeded
    random subset of that many coordinates (at least 32).
    """
    max_coords = max(max_coords, 32)
    params.zero_grad()
    loss = loss_fn(params)
    if not np.isfinite(loss.item()):
        raise EvaluationError(f"loss evaluated to {loss.item()}")
    loss.backward()
    analytic = {k: t.grad.copy() for k, t in params.items()}
    params.zero_grad()

    rng = np.random.default_rng(seed)
    errors: dict[str, float] = {}
    for name, t in params.items():
        flat = t.data.reshape(-1)
        n = flat.size
        coords = np.arange(n) if n <= max_coords else rng.choice(n, size=max_coords, replace=False)
        num_g, ana_g = [], []
        for i in coords:
            orig = flat[i]
            flat[i] = orig + FD_STEP
            up = _value(loss_fn, params)
            flat[i] = orig - FD_STEP
            down = _value(loss_fn, params)
            flat[i] = orig
            num_g.append((up - down) / (2 * FD_STEP))
            ana_g.append(analytic[name].reshape(-1)[i])
        a, num = np.array(ana_g), np.array(num_g)
        errors[name] = float(np.linalg.norm(a - num) / max(np.linalg.norm(a), np.linalg.norm(num), REL_FLOOR))
    return GradCheckReport(errors, tolerance)
