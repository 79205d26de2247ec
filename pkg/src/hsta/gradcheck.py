"""Finite-difference verification of every reverse-mode gradient rule.

Each check builds a scalar loss through the op(s) under test, runs the tape
backward, and compares against central differences coordinate by coordinate.
The suite covers the tensor primitives, both attention modules, the embedder,
and the full model. Used by the ``gradcheck`` CLI command and the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Param, Tape, Tensor, backward, finite_diff_grad

FD_STEP = 1e-5
REL_TOL = 1e-6
# Denominator floor: keeps exactly-zero reference coordinates from turning
# femto-scale roundoff into an unbounded ratio, while any real defect (sign
# flip, wrong transpose) still lands orders of magnitude above REL_TOL.
REL_FLOOR = 1e-3


def max_rel_err(analytic, reference, floor: float = REL_FLOOR) -> float:
    """Worst-case coordinatewise relative error with an absolute floor."""
    analytic = np.asarray(analytic, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    if analytic.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(reference)), floor)
    return float(np.max(np.abs(analytic - reference) / denom))


@dataclass
class GradCheckResult:
    group: str
    param: str
    rel_err: float

    @property
    def passed(self) -> bool:
        return self.rel_err < REL_TOL


def check_params(group: str, params: list[Param], loss_fn) -> list[GradCheckResult]:
    """Compare tape gradients of ``loss_fn`` against finite differences.

    ``loss_fn`` takes an optional tape and returns the scalar loss Tensor;
    it must read every param through the tape when one is given.
    """
    for p in params:
        p.zero_grad()
    with Tape() as tape:
        loss = loss_fn(tape)
    backward(tape, loss)
    results = []
    for p in params:
        fd = finite_diff_grad(lambda: loss_fn(None).item(), p, FD_STEP)
        results.append(GradCheckResult(group, p.name, max_rel_err(p.grad, fd.data)))
    return results
