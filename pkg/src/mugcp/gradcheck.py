"""Central finite-difference verification of tape gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .errors import ContractError, DeterminismError
from .tensor import Tape, Tensor


def relative_error(analytic, numeric) -> np.ndarray:
    """|a - n| / max(1, |a|, |n|), elementwise."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return np.abs(analytic - numeric) / scale


@dataclass
class GradCheckReport:
    errors: dict[str, float]
    step: float
    analytic: dict[str, np.ndarray] = field(repr=False, default_factory=dict)
    numeric: dict[str, np.ndarray] = field(repr=False, default_factory=dict)

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    def failures(self, tol: float) -> list[str]:
        return [k for k, v in self.errors.items() if not v < tol]

    def passed(self, tol: float) -> bool:
        return not self.failures(tol)

    def grouped(self, group_of: Callable[[str], str]) -> dict[str, float]:
        out: dict[str, float] = {}
        for name, err in self.errors.items():
            g = group_of(name)
            out[g] = max(out.get(g, 0.0), err)
        return out


def finite_diff_check(f: Callable[[Mapping[str, Tensor]], Tensor],
                      params: Mapping[str, Tensor], step: float = 1e-5) -> GradCheckReport:
    """Compare tape gradients of scalar ``f(params)`` with central differences.

    Every entry of every parameter is perturbed by ``±step``. ``f`` is first
    evaluated twice and must return bit-identical values.
    """
    if step <= 0:
        raise ContractError("step must be positive")
    first = f(params).data.tobytes()
    if f(params).data.tobytes() != first:
        raise DeterminismError("f returned different values on identical inputs")

    saved = {k: p.requires_grad for k, p in params.items()}
    for p in params.values():
        p.requires_grad = True
        p.grad = None
    try:
        with Tape() as tape:
            loss = f(params)
        tape.backward(loss)
    finally:
        for k, p in params.items():
            p.requires_grad = saved[k]
    analytic = {k: (np.zeros_like(p.data) if p.grad is None else p.grad.copy())
                for k, p in params.items()}

    numeric: dict[str, np.ndarray] = {}
    errors: dict[str, float] = {}
    for name, p in params.items():
        num = np.zeros_like(p.data, dtype=np.float64)
        for idx in np.ndindex(p.data.shape):
            orig = p.data[idx]
            p.data[idx] = orig + step
            fp = f(params).item()
            p.data[idx] = orig - step
            fm = f(params).item()
            p.data[idx] = orig
            num[idx] = (fp - fm) / (2.0 * step)
        numeric[name] = num
        errors[name] = float(relative_error(analytic[name], num).max()) if num.size else 0.0
    return GradCheckReport(errors=errors, step=step, analytic=analytic, numeric=numeric)
