"""Finite-difference verification of analytic gradients.

The harness perturbs input coordinates in place (restoring them afterwards),
so the checked computation must be deterministic and side-effect free. Use
double-precision tensors; the acceptance tolerances assume it.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .tensor import Tensor

REL_FLOOR = 1e-8


@dataclass
class InputReport:
    name: str
    max_rel_err: float
    checked_coords: int
    skipped_unstable: int = 0


@dataclass
class GradCheckReport:
    passed: bool
    per_input: list[InputReport] = field(default_factory=list)
    failure: Optional[str] = None

    @property
    def max_rel_err(self) -> float:
        return max((r.max_rel_err for r in self.per_input), default=float("nan"))


def grad_check(
    fn: Callable[[], Tensor],
    inputs: Sequence[Tensor],
    step: float = 1e-3,
    tol: float = 1e-4,
    sample: Optional[int] = None,
    seed: int = 0,
    sample_min_rel_grad: Optional[float] = None,
    skip_unstable: bool = False,
) -> GradCheckReport:
    """Compare analytic gradients of the scalar ``fn()`` against central differences.

    ``sample`` limits the number of coordinates checked per input (all when
    None). ``sample_min_rel_grad`` restricts sampling to coordinates whose
    analytic gradient is at least that fraction of the input's largest one;
    central differences cannot resolve near-zero gradients against the
    function's own rounding noise, so a check there measures nothing.
    ``skip_unstable`` validates each secant by step halving and skips
    coordinates where the two estimates disagree, i.e. where the function is
    not locally smooth (a perturbed relu/argmax sitting within ``step`` of
    its kink); such coordinates certify nothing in either direction. The
    relative error uses an absolute floor of 1e-8 in the denominator.
    Non-finite analytic or numeric gradients yield a failure report.
    """
    for t in inputs:
        t.requires_grad = True
        t.zero_grad()

    out = fn()
    if out.size != 1:
        raise ValueError("grad_check requires a scalar-valued computation")
    out.backward()

    analytic: list[np.ndarray] = []
    for t in inputs:
        g = t.grad if t.grad is not None else np.zeros_like(t.data)
        if not np.all(np.isfinite(g)):
            return GradCheckReport(passed=False, failure="non-finite analytic gradient")
        analytic.append(g.copy())
        t.zero_grad()

    rng = np.random.default_rng(seed)
    report = GradCheckReport(passed=True)
    for idx, t in enumerate(inputs):
        flat = t.data.reshape(-1)
        coords = np.arange(flat.size)
        if sample_min_rel_grad is not None:
            a_flat = np.abs(analytic[idx].reshape(-1))
            if a_flat.max() > 0:
                pool = np.nonzero(a_flat >= sample_min_rel_grad * a_flat.max())[0]
                if pool.size:
                    coords = pool
        if sample is not None and sample < coords.size:
            coords = rng.choice(coords, size=sample, replace=False)
        def secant(c: int, h: float) -> float:
            orig = flat[c]
            flat[c] = orig + h
            f_plus = float(fn().data)
            flat[c] = orig - h
            f_minus = float(fn().data)
            flat[c] = orig
            return (f_plus - f_minus) / (2.0 * h)

        worst = 0.0
        skipped = 0
        for c in coords:
            numeric = secant(c, step)
            if not np.isfinite(numeric):
                return GradCheckReport(passed=False, failure="non-finite numeric gradient")
            if skip_unstable:
                half = secant(c, step / 2.0)
                # a judgment at tol needs the two secants to agree well inside it
                if abs(numeric - half) > 0.3 * tol * max(REL_FLOOR, abs(numeric), abs(half)):
                    skipped += 1
                    continue
                numeric = half
            a = analytic[idx].reshape(-1)[c]
            rel = abs(a - numeric) / max(REL_FLOOR, abs(a), abs(numeric))
            worst = max(worst, rel)
        report.per_input.append(
            InputReport(name=f"input{idx}", max_rel_err=worst, checked_coords=len(coords) - skipped, skipped_unstable=skipped)
        )
        if worst >= tol:
            report.passed = False
    return report
