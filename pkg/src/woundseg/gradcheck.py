"""Central finite-difference gradient checking.

With ``skip_kinks`` the probe records the branch taken by every nonsmooth op
(ReLU masks, max-pool winners, loss clamps) at ``x``, ``x + h`` and ``x - h``.
An element whose stencil changes any branch straddles a kink, where the
central difference is not an estimate of the derivative; such elements are
counted in ``skipped`` instead of being compared.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward, no_grad, record_switches


@dataclass
class GradCheckReport:
    max_rel_err: float
    passed: bool
    worst: tuple[int, int] | None = None  # (input position, flat index)
    checked: int = 0
    failures: list[str] = field(default_factory=list)
    skipped: int = 0


def _sample_indices(size: int, max_checks: int | None, rng: np.random.Generator) -> np.ndarray:
    if max_checks is None or size <= max_checks:
        return np.arange(size)
    return np.sort(rng.choice(size, size=max_checks, replace=False))


def grad_check(
    forward_fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    h: float = 1e-4,
    tol: float = 1e-4,
    max_checks: int | None = None,
    seed: int = 0,
    skip_kinks: bool = False,
) -> GradCheckReport:
    """Compare analytic gradients of a scalar function with central differences.

    ``rel_err = |a - n| / max(|a|, |n|, 1e-8)`` per checked element. Inputs
    must be float64 tensors; ``max_checks`` limits the number of elements
    probed per input (sampled with ``seed``). ``checked`` counts compared
    elements and ``skipped`` the kink-straddling ones (``skip_kinks`` only).
    """
    for t in inputs:
        if t.dtype != np.float64:
            raise TypeError(f"grad_check requires float64 inputs, got {t.dtype}")

    with record_switches() as base:
        loss = forward_fn(*inputs)
    analytic = backward(loss, wrt=inputs)

    def probe():
        if not skip_kinks:
            return float(forward_fn(*inputs).data), True
        with record_switches() as sw:
            value = float(forward_fn(*inputs).data)
        same = len(sw) == len(base) and all(np.array_equal(a, b) for a, b in zip(sw, base))
        return value, same

    rng = np.random.default_rng(seed)
    report = GradCheckReport(max_rel_err=0.0, passed=True)
    for pos, t in enumerate(inputs):
        a_grad = analytic[pos]
        a_flat = np.zeros(t.size) if a_grad is None else a_grad.reshape(-1)
        if not t.data.flags.c_contiguous:
            t.data = np.ascontiguousarray(t.data)
        flat = t.data.reshape(-1)
        for i in _sample_indices(t.size, max_checks, rng):
            orig = flat[i]
            with no_grad():
                flat[i] = orig + h
                f_plus, smooth_plus = probe()
                flat[i] = orig - h
                f_minus, smooth_minus = probe()
            flat[i] = orig
            if not (smooth_plus and smooth_minus):
                report.skipped += 1
                continue
            num = (f_plus - f_minus) / (2.0 * h)
            report.checked += 1
            if not np.isfinite(num):
                report.passed = False
                report.failures.append(f"input {pos} index {i}: non-finite numeric gradient")
                continue
            a = float(a_flat[i])
            err = abs(a - num) / max(abs(a), abs(num), 1e-8)
            if err > report.max_rel_err:
                report.max_rel_err = err
                report.worst = (pos, int(i))
            if err > tol:
                report.passed = False
                report.failures.append(
                    f"input {pos} index {i}: analytic {a:.6g} numeric {num:.6g} rel {err:.3g}"
                )
    return report
