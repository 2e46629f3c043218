"""Mimic-query pool distilled against constructed prompts.

A fixed pool of learned rows plus a small MLP learner is regressed onto the
prompt rows the full pipeline builds from perspective-view detections.  Once
trained, the pool substitutes for the whole PV branch at inference: prompt
rows become h(e_m) directly and no camera forward, projection, or ground
lifting runs at all.
"""

from __future__ import annotations

import warnings
from typing import Optional

import numpy as np

from .diffcore import DiffArray, MLP, Module, as_diff, ops, parameter
from .prompts import InjectionBlock, PVPromptSet
from .validation import ContractViolation

DEFAULT_POOL_SIZE = 20
DEFAULT_DISTILL_WEIGHT = 10.0


class MimicPool(Module):
    """Learned prompt stand-ins: pool rows e_m and learner h."""

    def __init__(self, n_rows: int, d_prompt: int, rng: np.random.Generator,
                 hidden: Optional[int] = None):
        if n_rows < 1:
            raise ContractViolation(f"pool needs >= 1 row, got {n_rows}")
        hidden = hidden or d_prompt
        self.queries = parameter(rng.normal(0.0, 0.5, (n_rows, d_prompt)))
        self.h = MLP([d_prompt, hidden, d_prompt], rng)
        self.trained = False

    @property
    def n_rows(self) -> int:
        return self.queries.shape[0]

    def learned_rows(self) -> DiffArray:
        """h applied to every pool row."""
        return self.h(self.queries)


def distill_loss(prompts: PVPromptSet, pool: MimicPool,
                 lambda_distill: float = DEFAULT_DISTILL_WEIGHT) -> DiffArray:
    """Weighted MSE between detached prompt rows and aligned h(e_m) rows.

    Prompt rows are teacher targets: gradients reach only the pool.  Row i
    regresses onto pool row i mod n_rows.  Empty prompts give loss 0 (no
    teacher signal this step).
    """
    if prompts.is_empty:
        return as_diff(np.zeros(()))
    target = prompts.prompts.detach()
    p = target.shape[0]
    rows = ops.gather_rows(pool.learned_rows(),
                           np.arange(p) % pool.n_rows)
    diff = ops.subtract(target, rows)
    return ops.scale(ops.mean(ops.multiply(diff, diff)), lambda_distill)


def mimic_prompts(pool: MimicPool, block: InjectionBlock) -> PVPromptSet:
    """Prompt set sourced entirely from the pool; never touches PV inputs.

    Point-level rows are h(e_m); the single instance-level row is their
    phi_e aggregate.  Amplification is already baked into the targets the
    pool was trained on, so weights here are ones.
    """
    if not pool.trained:
        warnings.warn("mimic prompts requested from an untrained pool; "
                      "outputs will not resemble PV-derived prompts",
                      RuntimeWarning, stacklevel=2)
    rows = pool.learned_rows()
    n, d_p = rows.shape
    pooled = ops.reshape(ops.mean(rows, axis=0), (1, d_p))
    return PVPromptSet(
        prompts=rows,
        weights=np.ones(n),
        instances=block.phi_e(pooled),
        provenance=[(-1, i) for i in range(n)],
    )
