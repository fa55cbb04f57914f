"""Central finite-difference checks for analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

TINY = 1e-8
ABS_TOL = 1e-7


@dataclass
class GradCheckResult:
    name: str
    max_rel_err: float
    max_abs_err_tiny: float
    n_checked: int
    rtol: float
    worst: tuple = field(default=())

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.rtol and self.max_abs_err_tiny <= ABS_TOL

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status} {self.name}: max rel err {self.max_rel_err:.2e} "
                f"(tol {self.rtol:.0e}, {self.n_checked} elements)")


def project(out: Tensor, seed: int = 0) -> Tensor:
    """Reduce a tensor to a scalar by a fixed random linear functional."""
    r = np.random.default_rng(seed).standard_normal(out.shape).astype(out.dtype)
    return ad.sum(ad.mul(out, Tensor(r, dtype=out.dtype)))


def check_gradients(
    fn: Callable[[Sequence[Tensor]], Tensor],
    inputs: Sequence[np.ndarray],
    name: str = "fn",
    eps: float = 1e-4,
    rtol: float = 1e-4,
    max_per_input: int | None = None,
    seed: int = 0,
    wrt: Sequence[int] | None = None,
) -> GradCheckResult:
    """Compare backprop gradients of scalar ``fn`` against central differences.

    ``inputs`` are float64 arrays. Elements where |analytic| + |numeric| < 1e-8
    are compared absolutely against 1e-7 instead of relatively.
    """
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    wrt = range(len(arrays)) if wrt is None else wrt
    tensors = [Tensor(a, requires_grad=i in wrt, dtype=np.float64) for i, a in enumerate(arrays)]
    out = fn(tensors)
    out.backward()
    rng = np.random.default_rng(seed)

    def evaluate(vals):
        with ad.no_grad():
            return fn([Tensor(v, dtype=np.float64) for v in vals]).item()

    max_rel, max_abs, n, worst = 0.0, 0.0, 0, ()
    for i in wrt:
        analytic = tensors[i].grad
        if analytic is None:
            analytic = np.zeros_like(arrays[i])
        flat_idx = np.arange(arrays[i].size)
        if max_per_input is not None and flat_idx.size > max_per_input:
            flat_idx = np.sort(rng.choice(flat_idx, size=max_per_input, replace=False))
        for j in flat_idx:
            plus = [a.copy() for a in arrays]
            minus = [a.copy() for a in arrays]
            plus[i].reshape(-1)[j] += eps
            minus[i].reshape(-1)[j] -= eps
            num = (evaluate(plus) - evaluate(minus)) / (2 * eps)
            a = float(analytic.reshape(-1)[j])
            n += 1
            if abs(a) + abs(num) < TINY:
                max_abs = max(max_abs, abs(a - num))
                continue
            rel = abs(a - num) / max(abs(a), abs(num))
            if rel > max_rel:
                max_rel, worst = rel, (i, int(j), a, num)
    return GradCheckResult(name, max_rel, max_abs, n, rtol, worst)
