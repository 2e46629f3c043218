"""Prompt construction from perspective-view detections, plus injection.

Detected PV instances are lifted to the ground plane, embedded together with
their predicted point scales, weighted by exponentially amplified inverse
uncertainty, and combined additively with learned mimic rows.  The resulting
point-level and instance-level prompts enter the main model through two
residual cross-attention injections: one over flattened BEV feature cells,
one over map queries.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .decoder import HEAD_SIGMA_HI, SpaceSpec
from .diffcore import DiffArray, Linear, MLP, Module, ops
from .geometry import FRAME_PIXEL, CameraModel, Polyline2D, ipm_pv_to_ego
from .validation import ContractViolation, check_shape

logger = logging.getLogger(__name__)

DEFAULT_SCORE_THRESHOLD = 0.4


@dataclass(frozen=True)
class PVInstance:
    """One detected element in a single camera image, held as constants.

    Arrays are plain numpy: the PV branch is a frozen teacher and no
    gradient flows back into its outputs.
    """

    camera: str
    scores: np.ndarray   # (3,) sigmoid class scores
    points: np.ndarray   # (N, 2) pixel coordinates
    sigmas: np.ndarray   # (N, 2) positive pixel scales

    def __post_init__(self):
        scores = np.asarray(self.scores, dtype=np.float64)
        points = np.asarray(self.points, dtype=np.float64)
        sigmas = np.asarray(self.sigmas, dtype=np.float64)
        check_shape("scores", scores, (3,))
        check_shape("points", points, (-1, 2))
        check_shape("sigmas", sigmas, points.shape)
        if not (np.all(np.isfinite(scores)) and np.all(np.isfinite(points))
                and np.all(np.isfinite(sigmas))):
            raise ContractViolation(f"instance {self.camera!r}: non-finite field")
        if np.any(scores < 0) or np.any(scores > 1):
            raise ContractViolation("scores must lie in [0, 1]")
        if np.any(sigmas <= 0) or np.any(sigmas > HEAD_SIGMA_HI * (1 + 1e-9)):
            raise ContractViolation("sigmas must be positive head-range scales")
        for name, arr in (("scores", scores), ("points", points),
                          ("sigmas", sigmas)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def score(self) -> float:
        """Detection confidence: the max class score."""
        return float(self.scores.max())


def select_candidates(instances: Sequence[PVInstance],
                      c_thr: float = DEFAULT_SCORE_THRESHOLD
                      ) -> List[PVInstance]:
    """Keep instances whose confidence strictly exceeds the threshold."""
    if not 0.0 <= c_thr <= 1.0:
        raise ContractViolation(f"c_thr must be in [0, 1], got {c_thr}")
    return [inst for inst in instances if inst.score > c_thr]


class InjectionBlock(Module):
    """Learned pieces of prompt construction and both injections.

    ``phi_p``/``phi_sigma`` embed normalized ground points and scales into
    the two halves of a prompt row; ``phi_e`` aggregates an instance's rows;
    the two q/k/v sets drive the BEV-cell and map-query cross-attentions.
    """

    def __init__(self, d_model: int, d_prompt: int,
                 rng: np.random.Generator, hidden: Optional[int] = None):
        if d_prompt % 2 != 0:
            raise ContractViolation(f"d_prompt must be even, got {d_prompt}")
        hidden = hidden or d_prompt
        self.d_model = d_model
        self.d_prompt = d_prompt
        half = d_prompt // 2
        self.phi_p = MLP([2, hidden, half], rng)
        self.phi_sigma = MLP([2, hidden, half], rng)
        self.phi_e = MLP([d_prompt, hidden, d_prompt], rng)
        self.bev_q = Linear(d_model, d_model, rng)
        self.bev_k = Linear(d_prompt, d_model, rng)
        self.bev_v = Linear(d_prompt, d_model, rng)
        self.query_q = Linear(d_model, d_model, rng)
        self.query_k = Linear(d_prompt, d_model, rng)
        self.query_v = Linear(d_prompt, d_model, rng)


@dataclass
class PVPromptSet:
    """Prompt rows ready for injection.

    ``prompts`` holds one row per retained ground-valid point; ``weights``
    the amplification factor applied to each row's embedding half;
    ``instances`` one aggregated row per surviving source instance.
    ``provenance`` maps prompt row -> (index into the selected-instance
    list, original point index).
    """

    prompts: Optional[DiffArray]      # (P, D_p) or None when empty
    weights: np.ndarray               # (P,)
    instances: Optional[DiffArray]    # (S, D_p) or None when empty
    provenance: List[Tuple[int, int]] = field(default_factory=list)

    @classmethod
    def empty(cls) -> "PVPromptSet":
        return cls(prompts=None, weights=np.zeros(0), instances=None)

    @property
    def is_empty(self) -> bool:
        return self.prompts is None

    def __len__(self) -> int:
        return 0 if self.prompts is None else self.prompts.shape[0]


def _amplified_weights(inv_norms: np.ndarray) -> np.ndarray:
    """exp of each point's share of the summed inverse scale norms."""
    shares = inv_norms / inv_norms.sum()
    if abs(shares.sum() - 1.0) > 1e-9:
        raise ContractViolation("inverse-scale shares failed to normalize")
    return np.exp(shares)


def build_prompts(selected: Sequence[PVInstance], rig: Sequence[CameraModel],
                  mimic_queries: DiffArray, block: InjectionBlock,
                  space: SpaceSpec, omega_global: bool = False
                  ) -> PVPromptSet:
    """Lift selected PV instances to ego ground and embed them as prompts.

    Points whose back-projection ray misses the ground plane are dropped;
    an instance losing every point is skipped (count logged).  Weight
    amplification is computed per instance unless ``omega_global``.
    """
    cameras = {cam.name: cam for cam in rig}
    n_mimic = mimic_queries.shape[0]

    ground_parts, sigma_parts, inv_parts = [], [], []
    spans: List[Tuple[int, int]] = []       # retained-row span per instance
    provenance: List[Tuple[int, int]] = []
    dropped = 0
    cursor = 0
    for idx, inst in enumerate(selected):
        if inst.camera not in cameras:
            raise ContractViolation(
                f"instance camera {inst.camera!r} not in rig "
                f"{sorted(cameras)}"
            )
        cam = cameras[inst.camera]
        line = Polyline2D(inst.points, FRAME_PIXEL)
        ground, horizon = ipm_pv_to_ego(line, cam)
        keep = ~horizon
        if not np.any(keep):
            dropped += 1
            continue
        kept_idx = np.flatnonzero(keep)
        diag = float(np.hypot(cam.width, cam.height))
        ground_parts.append(space.normalize_np(ground.points[keep]))
        sigma_parts.append(inst.sigmas[keep] / diag)
        inv_parts.append(1.0 / np.linalg.norm(inst.sigmas[keep], axis=1))
        spans.append((cursor, cursor + len(kept_idx)))
        provenance.extend((idx, int(j)) for j in kept_idx)
        cursor += len(kept_idx)

    if dropped:
        logger.info("dropped %d instance(s) with no ground-valid points",
                    dropped)
    if not spans:
        return PVPromptSet.empty()

    ground_all = np.concatenate(ground_parts, axis=0)
    sigma_all = np.concatenate(sigma_parts, axis=0)
    inv_all = np.concatenate(inv_parts, axis=0)
    if omega_global:
        weights = _amplified_weights(inv_all)
    else:
        weights = np.concatenate(
            [_amplified_weights(inv_all[lo:hi]) for lo, hi in spans])

    embedded = ops.concatenate(
        [block.phi_p(ground_all), block.phi_sigma(sigma_all)], axis=1)
    p, d_p = embedded.shape
    w_col = ops.broadcast_to(ops.reshape(weights, (p, 1)), (p, d_p))
    mimic_rows = ops.gather_rows(mimic_queries,
                                 np.arange(p) % n_mimic)
    prompts = ops.add(ops.multiply(w_col, embedded), mimic_rows)

    pooled = ops.concatenate(
        [ops.reshape(ops.mean(ops.gather_rows(prompts, np.arange(lo, hi)),
                              axis=0), (1, d_p))
         for lo, hi in spans], axis=0)
    instances = block.phi_e(pooled)
    return PVPromptSet(prompts=prompts, weights=weights,
                       instances=instances, provenance=provenance)


def _cross_attend(queries: DiffArray, keys_src: DiffArray,
                  q_proj: Linear, k_proj: Linear, v_proj: Linear
                  ) -> DiffArray:
    q, k, v = q_proj(queries), k_proj(keys_src), v_proj(keys_src)
    logits = ops.scale(ops.matmul(q, k.T), 1.0 / np.sqrt(q.shape[1]))
    return ops.matmul(ops.softmax(logits, axis=-1), v)


def inject_bev_features(f_bev: DiffArray, prompts: PVPromptSet,
                        block: InjectionBlock) -> DiffArray:
    """Each BEV cell attends over point-level prompts; residual update.

    An empty prompt set returns the input object untouched.
    """
    if prompts.is_empty:
        return f_bev
    h, w, d = f_bev.shape
    flat = ops.reshape(f_bev, (h * w, d))
    out = _cross_attend(flat, prompts.prompts,
                        block.bev_q, block.bev_k, block.bev_v)
    return ops.reshape(ops.add(flat, out), (h, w, d))


def inject_map_queries(q_map: DiffArray, prompts: PVPromptSet,
                       block: InjectionBlock) -> DiffArray:
    """Map queries attend over instance-level prompts; residual update."""
    if prompts.is_empty:
        return q_map
    out = _cross_attend(q_map, prompts.instances,
                        block.query_q, block.query_k, block.query_v)
    return ops.add(q_map, out)
