"""Chamfer-distance average precision for vectorized map predictions.

Evaluation pools predictions over scenes per (class, threshold) cell:
greedy within-scene matching in descending score order, then a pooled
precision-recall curve integrated with 101-point interpolation.  All nine
class x threshold APs average into mAP.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .geometry import Polyline2D
from .scenes import CLASS_NAMES, Scene
from .validation import ContractViolation

THRESHOLDS = (0.5, 1.0, 1.5)

# per-scene prediction: (class_id, score, points (N, 2) ego)
PredTuple = Tuple[int, float, np.ndarray]
# per-scene ground truth: (class_id, points (N, 2) ego)
GtTuple = Tuple[int, np.ndarray]


def _chamfer(a: np.ndarray, b: np.ndarray) -> float:
    d = np.linalg.norm(a[:, None, :] - b[None, :, :], axis=2)
    return 0.5 * (d.min(axis=1).mean() + d.min(axis=0).mean())


def chamfer_distance(a: Polyline2D, b: Polyline2D) -> float:
    """Symmetric mean of point-to-nearest-point Euclidean distances."""
    if a.frame != b.frame:
        raise ContractViolation(
            f"chamfer_distance: frame mismatch {a.frame!r} vs {b.frame!r}"
        )
    return float(_chamfer(a.points, b.points))


def scene_ground_truth(scene: Scene) -> List[GtTuple]:
    return [(e.class_id, e.line.points) for e in scene.elements]


def _match_scene(preds: Sequence[PredTuple], gts: Sequence[GtTuple],
                 class_id: int, tau: float) -> List[Tuple[float, int, bool]]:
    """Greedy matching for one scene; returns (score, pred_id, is_tp) rows."""
    gt_pts = [p for c, p in gts if c == class_id]
    cls_preds = [(score, i, pts) for i, (c, score, pts) in enumerate(preds)
                 if c == class_id]
    cls_preds.sort(key=lambda t: (-t[0], t[1]))
    used = [False] * len(gt_pts)
    rows = []
    for score, pred_id, pts in cls_preds:
        best_d, best_j = np.inf, -1
        for j, g in enumerate(gt_pts):
            if used[j]:
                continue
            d = _chamfer(pts, g)
            if d < best_d:
                best_d, best_j = d, j
        if best_j >= 0 and best_d < tau:
            used[best_j] = True
            rows.append((score, pred_id, True))
        else:
            rows.append((score, pred_id, False))
    return rows


def _interpolated_ap(rows: List[Tuple[float, int, int, bool]],
                     n_gt: int) -> Tuple[float, List[Tuple[float, float]]]:
    """101-point interpolated area under the pooled PR curve.

    ``rows`` are (score, scene_idx, pred_id, is_tp); ties broken by lower
    scene then prediction id so results never depend on input order.
    """
    if n_gt == 0:
        return (1.0 if not rows else 0.0), []
    if not rows:
        return 0.0, []
    rows = sorted(rows, key=lambda r: (-r[0], r[1], r[2]))
    tp = np.cumsum([r[3] for r in rows])
    k = np.arange(1, len(rows) + 1)
    precision = tp / k
    recall = tp / n_gt
    ap = 0.0
    for r in np.linspace(0.0, 1.0, 101):
        mask = recall >= r - 1e-12
        ap += precision[mask].max() if mask.any() else 0.0
    return ap / 101.0, list(zip(recall.tolist(), precision.tolist()))


def ap_at_threshold(preds_by_scene: Sequence[Sequence[PredTuple]],
                    gts_by_scene: Sequence[Sequence[GtTuple]],
                    class_id: int, tau: float):
    """AP for one class at one Chamfer threshold, pooled over scenes.

    Returns (ap, tp_count, fp_count, n_gt, pr_samples).
    """
    if len(preds_by_scene) != len(gts_by_scene):
        raise ContractViolation(
            f"scene count mismatch: {len(preds_by_scene)} predictions vs "
            f"{len(gts_by_scene)} ground truths"
        )
    pooled = []
    n_gt = 0
    for scene_idx, (preds, gts) in enumerate(zip(preds_by_scene, gts_by_scene)):
        n_gt += sum(1 for c, _ in gts if c == class_id)
        for score, pred_id, is_tp in _match_scene(preds, gts, class_id, tau):
            pooled.append((score, scene_idx, pred_id, is_tp))
    ap, pr = _interpolated_ap(pooled, n_gt)
    tp_count = sum(1 for r in pooled if r[3])
    fp_count = len(pooled) - tp_count
    return ap, tp_count, fp_count, n_gt, pr


@dataclass(frozen=True)
class APResult:
    per_class: Dict[str, Dict[float, float]]
    counts: Dict[str, Dict[float, Dict[str, int]]]
    mAP: float
    pr_samples: Dict[str, Dict[float, List[Tuple[float, float]]]]

    def to_dict(self) -> dict:
        return {
            "per_class": {c: {str(t): ap for t, ap in taus.items()}
                          for c, taus in self.per_class.items()},
            "mAP": self.mAP,
            "counts": {c: {str(t): dict(v) for t, v in taus.items()}
                       for c, taus in self.counts.items()},
        }

    def to_csv(self) -> str:
        lines = ["class,threshold,ap,tp,fp,n_gt"]
        for c in CLASS_NAMES:
            for t in sorted(self.per_class[c]):
                cnt = self.counts[c][t]
                lines.append(f"{c},{t},{self.per_class[c][t]:.6f},"
                             f"{cnt['tp']},{cnt['fp']},{cnt['n_gt']}")
        lines.append(f"mAP,,{self.mAP:.6f},,,")
        return "\n".join(lines) + "\n"


def map_metric(preds_by_scene: Sequence[Sequence[PredTuple]],
               gts_by_scene: Sequence[Sequence[GtTuple]],
               thresholds: Sequence[float] = THRESHOLDS) -> APResult:
    """AP over every class at every threshold; mAP is their plain mean."""
    per_class: Dict[str, Dict[float, float]] = {}
    counts: Dict[str, Dict[float, Dict[str, int]]] = {}
    prs: Dict[str, Dict[float, List[Tuple[float, float]]]] = {}
    values = []
    for class_id, name in enumerate(CLASS_NAMES):
        per_class[name] = {}
        counts[name] = {}
        prs[name] = {}
        for tau in thresholds:
            ap, tp, fp, n_gt, pr = ap_at_threshold(
                preds_by_scene, gts_by_scene, class_id, tau)
            per_class[name][tau] = ap
            counts[name][tau] = {"tp": tp, "fp": fp, "n_gt": n_gt}
            prs[name][tau] = pr
            values.append(ap)
    return APResult(per_class=per_class, counts=counts,
                    mAP=float(np.mean(values)), pr_samples=prs)
