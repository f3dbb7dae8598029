"""Central finite-difference check of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


@dataclass
class CoordCheck:
    leaf: int
    index: tuple
    analytic: float
    numeric: float

    @property
    def rel_error(self) -> float:
        scale = max(abs(self.analytic), abs(self.numeric))
        return abs(self.analytic - self.numeric) / scale if scale > 0 else 0.0


@dataclass
class GradcheckResult:
    rtol: float
    atol: float
    checks: list[CoordCheck] = field(default_factory=list)

    def ok(self, c: CoordCheck) -> bool:
        return abs(c.analytic - c.numeric) <= self.atol + self.rtol * max(abs(c.analytic), abs(c.numeric))

    @property
    def passed(self) -> bool:
        return all(self.ok(c) for c in self.checks)

    @property
    def failures(self) -> list[CoordCheck]:
        return [c for c in self.checks if not self.ok(c)]

    @property
    def worst_rel(self) -> float:
        return max((c.rel_error for c in self.checks), default=0.0)


def gradcheck(fn: Callable[[], Tensor], leaves: Sequence[Tensor], n_coords: int = 16,
              h: float = 1e-3, rtol: float = 1e-2, atol: float = 1e-5, seed: int = 0) -> GradcheckResult:
    """Compare backward() against central differences on random coordinates.

    ``fn`` rebuilds the output from ``leaves``; a non-scalar output is
    projected onto fixed random weights first. The difference quotient is
    accumulated in float64. A coordinate passes when
    |analytic - numeric| <= atol + rtol * max(|analytic|, |numeric|).
    """
    rng = np.random.default_rng(seed)
    for t in leaves:
        t.grad = None
    out = fn()
    weights = rng.standard_normal(out.shape).astype(np.float32)
    (out * Tensor(weights)).sum().backward()

    def f() -> float:
        return float((fn().data.astype(np.float64) * weights).sum())

    result = GradcheckResult(rtol, atol)
    for li, t in enumerate(leaves):
        grad = t.grad if t.grad is not None else np.zeros_like(t.data)
        for _ in range(n_coords):
            idx = tuple(int(rng.integers(0, s)) for s in t.shape)
            old = t.data[idx].copy()
            t.data[idx] = old + h
            fp = f()
            t.data[idx] = old - h
            fm = f()
            t.data[idx] = old
            result.checks.append(CoordCheck(li, idx, float(grad[idx]), (fp - fm) / (2 * h)))
    return result
