"""Central-difference gradient verification."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from ..validation import ContractViolation, NumericalError
from .array import DiffArray, Tape


def grad_check(f: Callable[[], DiffArray], params: Sequence[DiffArray],
               eps: float = 1e-6) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` must be a pure scalar-valued closure over ``params``: calling it
    twice with the same parameter values must produce the same output (fix
    any noise draws beforehand).  Error is measured elementwise as
    |analytic - numeric| / max(1, |analytic|) and the max over all elements
    of all params is returned.
    """
    if isinstance(params, DiffArray):
        params = [params]
    params = list(params)
    if not params:
        raise ContractViolation("grad_check: no parameters given")
    for p in params:
        p.zero_grad()
    with Tape() as tape:
        out = f()
    tape.backward(out)
    analytic = [p.grad.copy() for p in params]

    worst = 0.0
    for p, a in zip(params, analytic):
        flat = p.values.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = f().item()
            flat[i] = orig - eps
            lo = f().item()
            flat[i] = orig
            if not (np.isfinite(hi) and np.isfinite(lo)):
                raise NumericalError("grad_check: non-finite function value")
            numeric = (hi - lo) / (2.0 * eps)
            ai = a.ravel()[i]
            worst = max(worst, abs(ai - numeric) / max(1.0, abs(ai)))
    return worst
