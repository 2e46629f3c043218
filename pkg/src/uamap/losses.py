"""Set matching and training losses.

Predictions are matched to ground-truth elements per decoder layer with an
exact minimum-cost assignment; matched pairs drive Manhattan point
regression and a Laplace negative log-likelihood, while classification uses
a sigmoid focal loss over all predictions.  Ground-truth polylines are
matched under the cheaper of their two traversal directions.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import linear_sum_assignment

from .decoder import LayerPrediction
from .diffcore import DiffArray, as_diff, ops
from .distill import MimicPool, distill_loss
from .geometry import FRAME_EGO, Polyline2D, resample_polyline
from .prompts import PVPromptSet
from .validation import ContractViolation

GtElement = Tuple[int, np.ndarray]    # (class_id, points (P, 2))


@dataclass
class LossWeights:
    """Loss and matching-cost weights with their standard defaults."""

    lambda_pts: float = 50.0
    lambda_cls: float = 5.0
    lambda_nll: float = 0.05
    lambda_distill: float = 10.0
    match_w_cls: float = 1.0
    match_w_pts: float = 1.0
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    nll_last_layer_only: bool = False


@dataclass(frozen=True)
class MatchResult:
    """Injective prediction-to-ground-truth assignment for one layer.

    ``targets`` holds each matched ground truth resampled to the prediction
    point count, already flipped to the traversal direction that won the
    cost comparison, aligned row-for-row with ``pairs``.
    """

    pairs: List[Tuple[int, int]]
    unmatched_preds: List[int]
    cost: float
    targets: np.ndarray           # (P, N, 2)
    target_classes: np.ndarray    # (P,) int

    def __post_init__(self):
        pred_ids = [i for i, _ in self.pairs]
        gt_ids = [j for _, j in self.pairs]
        if len(set(pred_ids)) != len(pred_ids) or len(set(gt_ids)) != len(gt_ids):
            raise ContractViolation("assignment must be injective both ways")


def _resampled_directions(gts: Sequence[GtElement], n_points: int
                          ) -> np.ndarray:
    """(G, 2, N, 2): each ground truth at N points, forward and reversed."""
    out = np.empty((len(gts), 2, n_points, 2))
    for j, (_, pts) in enumerate(gts):
        fwd = resample_polyline(Polyline2D(pts, FRAME_EGO), n_points).points
        out[j, 0] = fwd
        out[j, 1] = fwd[::-1]
    return out


def hungarian_match(pred: LayerPrediction, gts: Sequence[GtElement],
                    weights: Optional[LossWeights] = None) -> MatchResult:
    """Exact minimum-cost assignment of predictions to ground truths.

    Pair cost = w_cls * (1 - score of the gt class) + w_pts * mean
    per-point Manhattan distance, the latter minimized over the ground
    truth's two traversal directions.
    """
    weights = weights or LossWeights()
    m, n_points = pred.points.shape[0], pred.points.shape[1]
    if not gts:
        return MatchResult(pairs=[], unmatched_preds=list(range(m)),
                           cost=0.0, targets=np.zeros((0, n_points, 2)),
                           target_classes=np.zeros(0, dtype=int))

    directions = _resampled_directions(gts, n_points)     # (G, 2, N, 2)
    pred_pts = pred.points.values                          # (M, N, 2)
    # (M, G, 2): mean Manhattan distance per orientation
    dist = np.abs(pred_pts[:, None, None] - directions[None]) \
        .sum(axis=-1).mean(axis=-1)
    pts_cost = dist.min(axis=2)
    orient = dist.argmin(axis=2)

    classes = np.array([c for c, _ in gts])
    cls_cost = 1.0 - pred.scores.values[:, classes]
    cost = weights.match_w_cls * cls_cost + weights.match_w_pts * pts_cost

    rows, cols = linear_sum_assignment(cost)
    pairs = list(zip(rows.tolist(), cols.tolist()))
    matched_preds = {i for i, _ in pairs}
    targets = np.stack([directions[j, orient[i, j]] for i, j in pairs]) \
        if pairs else np.zeros((0, n_points, 2))
    return MatchResult(
        pairs=pairs,
        unmatched_preds=[i for i in range(m) if i not in matched_preds],
        cost=float(cost[rows, cols].sum()),
        targets=targets,
        target_classes=classes[cols],
    )


def _gather_matched(batched: DiffArray, pairs: List[Tuple[int, int]]
                    ) -> DiffArray:
    """Select matched prediction rows from an (M, N, 2) array -> (P, N, 2)."""
    m, n, d = batched.shape
    idx = [i for i, _ in pairs]
    flat = ops.reshape(batched, (m, n * d))
    return ops.reshape(ops.gather_rows(flat, idx), (len(idx), n, d))


def point_loss(pred_points: DiffArray, match: MatchResult,
               lambda_pts: float = 50.0) -> DiffArray:
    """Mean per-point Manhattan distance over matched pairs, weighted."""
    if not match.pairs:
        return as_diff(np.zeros(()))
    sel = _gather_matched(pred_points, match.pairs)
    diff = ops.absolute(ops.subtract(sel, match.targets))
    return ops.scale(ops.mean(ops.sum(diff, axis=2)), lambda_pts)


def nll_loss(pred_points: DiffArray, pred_sigmas: DiffArray,
             match: MatchResult, lambda_nll: float = 0.05) -> DiffArray:
    """Laplace negative log-likelihood of matched points under (p, sigma)."""
    if not match.pairs:
        return as_diff(np.zeros(()))
    if np.any(pred_sigmas.values <= 0.0):
        raise ContractViolation("nll_loss needs strictly positive sigmas")
    sel = _gather_matched(pred_points, match.pairs)
    sig = _gather_matched(pred_sigmas, match.pairs)
    resid = ops.absolute(ops.subtract(sel, match.targets))
    terms = ops.add(ops.log(ops.scale(sig, 2.0)), ops.divide(resid, sig))
    return ops.scale(ops.mean(ops.sum(terms, axis=2)), lambda_nll)


def focal_cls_loss(pred_scores: DiffArray, match: MatchResult,
                   lambda_cls: float = 5.0, alpha: float = 0.25,
                   gamma: float = 2.0) -> DiffArray:
    """Sigmoid focal loss; matched rows target their gt class one-hot,
    unmatched rows target all-background.  Mean over predictions."""
    m, n_cls = pred_scores.shape
    target = np.zeros((m, n_cls))
    for (i, _), c in zip(match.pairs, match.target_classes):
        target[i, c] = 1.0

    p = ops.clip(pred_scores, 1e-7, 1.0 - 1e-7)
    one_minus = ops.subtract(np.ones((m, n_cls)), p)

    def power(base: DiffArray) -> DiffArray:
        return ops.exp(ops.scale(ops.log(base), gamma))

    pos = ops.scale(ops.multiply(power(one_minus), ops.log(p)), -alpha)
    neg = ops.scale(ops.multiply(power(p), ops.log(one_minus)),
                    -(1.0 - alpha))
    elems = ops.add(ops.multiply(pos, target),
                    ops.multiply(neg, 1.0 - target))
    return ops.scale(ops.mean(ops.sum(elems, axis=1)), lambda_cls)


def total_loss(layer_preds: Sequence[LayerPrediction],
               gts: Sequence[GtElement],
               weights: Optional[LossWeights] = None,
               prompts: Optional[PVPromptSet] = None,
               pool: Optional[MimicPool] = None
               ) -> Tuple[DiffArray, Dict[str, float]]:
    """Deep-supervised sum over layers plus one distillation term.

    Every layer is matched independently; the negative log-likelihood term
    applies per layer unless ``weights.nll_last_layer_only``.  Returns the
    scalar loss and a per-term breakdown for logging.
    """
    weights = weights or LossWeights()
    if not layer_preds:
        raise ContractViolation("total_loss needs at least one layer")
    parts: Dict[str, float] = {"l_pts": 0.0, "l_cls": 0.0, "l_nll": 0.0,
                               "l_distill": 0.0}
    total: Optional[DiffArray] = None

    def accumulate(term: DiffArray, key: str) -> None:
        nonlocal total
        parts[key] += term.item()
        total = term if total is None else ops.add(total, term)

    last = len(layer_preds) - 1
    for li, pred in enumerate(layer_preds):
        match = hungarian_match(pred, gts, weights)
        accumulate(point_loss(pred.points, match, weights.lambda_pts),
                   "l_pts")
        accumulate(focal_cls_loss(pred.scores, match, weights.lambda_cls,
                                  weights.focal_alpha, weights.focal_gamma),
                   "l_cls")
        if not weights.nll_last_layer_only or li == last:
            accumulate(nll_loss(pred.points, pred.sigmas, match,
                                weights.lambda_nll), "l_nll")

    if pool is not None and prompts is not None:
        accumulate(distill_loss(prompts, pool, weights.lambda_distill),
                   "l_distill")
    parts["total"] = total.item()
    return total, parts
