"""Uncertainty-aware decoder: stochastic attention and Laplace point heads.

Attention weights are Gaussian-reparameterized: an MLP predicts {mu, sigma}
per sampling slot and the applied weight is alpha = mu + sigma * eps with
eps ~ N(0,1) in sample mode, or alpha = mu in mean mode.  Gradients reach mu
and sigma through the reparameterization, never through eps.

Point heads emit sigmoid-normalized coordinates mapped affinely onto the
output space (BEV perception range or PV image bounds) plus a positive
Laplace scale per coordinate and 3 sigmoid class scores.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from .diffcore import DiffArray, Linear, MLP, Module, as_diff, ops, parameter
from .validation import ContractViolation, check_finite

ATTN_SIGMA_LO, ATTN_SIGMA_HI = 1e-4, 10.0
HEAD_SIGMA_LO, HEAD_SIGMA_HI = 1e-3, 20.0


@dataclass(frozen=True)
class SpaceSpec:
    """Output-space geometry shared by the head and the attention sampler.

    ``kind`` is "bev" or "pv".  Normalized points pair coordinate 0 with the
    first output coordinate (ego x / pixel u) and coordinate 1 with the
    second (ego y / pixel v).  In BEV grids the first coordinate runs along
    grid rows; in PV grids it runs along grid columns, so the grid-sample
    mapping swaps axes per kind.
    """

    kind: str
    lo: Tuple[float, float]
    hi: Tuple[float, float]

    def __post_init__(self):
        if self.kind not in ("bev", "pv"):
            raise ContractViolation(f"unknown space kind {self.kind!r}")
        if not (self.hi[0] > self.lo[0] and self.hi[1] > self.lo[1]):
            raise ContractViolation("space bounds must have positive extent")

    @classmethod
    def bev(cls, x_range, y_range) -> "SpaceSpec":
        return cls("bev", (x_range[0], y_range[0]), (x_range[1], y_range[1]))

    @classmethod
    def pv(cls, width: int, height: int) -> "SpaceSpec":
        return cls("pv", (0.0, 0.0), (float(width), float(height)))

    def span(self) -> np.ndarray:
        return np.array([self.hi[0] - self.lo[0], self.hi[1] - self.lo[1]])

    def normalized_to_grid(self, pts_norm: DiffArray,
                           grid_shape: Tuple[int, ...]) -> DiffArray:
        """Normalized [0,1]^2 points -> fractional grid-sample (x, y) coords."""
        h, w = grid_shape[0], grid_shape[1]
        if self.kind == "bev":
            # first coordinate runs along rows: swap before scaling to (x, y)
            pts_norm = ops.gather_rows(pts_norm.T, [1, 0]).T
        return ops.add(ops.multiply(pts_norm, np.array([w, h])), -0.5)

    def denormalize(self, pts_norm: DiffArray) -> DiffArray:
        return ops.add(ops.multiply(pts_norm, self.span()),
                       np.array(self.lo))

    def normalize_np(self, pts: np.ndarray) -> np.ndarray:
        return (np.asarray(pts) - np.array(self.lo)) / self.span()


class SelfAttention(Module):
    """Single-head softmax attention over the query set, residual output."""

    def __init__(self, dim: int, rng: np.random.Generator):
        self.q_proj = Linear(dim, dim, rng)
        self.k_proj = Linear(dim, dim, rng)
        self.v_proj = Linear(dim, dim, rng)
        self.out_proj = Linear(dim, dim, rng)
        self.scale = 1.0 / np.sqrt(dim)

    def __call__(self, x: DiffArray) -> DiffArray:
        q, k, v = self.q_proj(x), self.k_proj(x), self.v_proj(x)
        logits = ops.scale(ops.matmul(q, k.T), self.scale)
        attn = ops.softmax(logits, axis=-1)
        return ops.add(x, self.out_proj(ops.matmul(attn, v)))


class FFN(Module):
    def __init__(self, dim: int, hidden: int, rng: np.random.Generator):
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, dim, rng)

    def __call__(self, x: DiffArray) -> DiffArray:
        return ops.add(x, self.fc2(ops.relu(self.fc1(x))))


class UAAttention(Module):
    """Cross-attention into a feature grid with stochastic sample weights.

    For each query, ``offset_mlp`` places K sampling points around its
    reference point (normalized space), features are gathered bilinearly,
    projected, and combined with weights alpha_k; the result is projected
    and added residually.
    """

    def __init__(self, dim: int, feat_dim: int, k: int, space: SpaceSpec,
                 rng: np.random.Generator):
        if k < 1:
            raise ContractViolation(f"need k >= 1 sampling slots, got {k}")
        self.k = k
        self.space = space
        self.mu_mlp = MLP([dim, dim, k], rng)
        self.sigma_mlp = MLP([dim, dim, k], rng)
        self.offset_mlp = MLP([dim, dim, k * 2], rng)
        self.value_proj = Linear(feat_dim, dim, rng)
        self.output_proj = Linear(dim, dim, rng)
        # Start near-deterministic: sigma ~= 0.05 so early sample-mode
        # gradients are not drowned in weight noise; it grows where needed.
        last = self.sigma_mlp.layers[-1]
        last.weight.values *= 0.1
        last.bias.values[:] = np.log(0.05)

    def weight_stats(self, queries: DiffArray) -> Tuple[DiffArray, DiffArray]:
        mu = self.mu_mlp(queries)
        sigma = ops.clip(ops.exp(self.sigma_mlp(queries)),
                         ATTN_SIGMA_LO, ATTN_SIGMA_HI)
        return mu, sigma

    def __call__(self, queries: DiffArray, refs: DiffArray, grid: DiffArray,
                 mode: str, rng: Optional[np.random.Generator]) -> DiffArray:
        if mode not in ("sample", "mean"):
            raise ContractViolation(f"unknown attention mode {mode!r}")
        check_finite("queries", queries.values)
        m = queries.shape[0]
        mu, sigma = self.weight_stats(queries)
        if mode == "sample":
            if rng is None:
                raise ContractViolation("sample mode needs an rng")
            eps = rng.standard_normal((m, self.k))
            alpha = ops.add(mu, ops.multiply(sigma, eps))
        else:
            alpha = mu

        offsets = self.offset_mlp(queries).reshape(m, self.k, 2)
        refs_b = ops.broadcast_to(ops.reshape(refs, (m, 1, 2)),
                                  (m, self.k, 2))
        pts_norm = ops.add(refs_b, offsets).reshape(m * self.k, 2)
        coords = self.space.normalized_to_grid(pts_norm, grid.shape)
        feats = ops.grid_sample(grid, coords)          # (m*k, C)
        vals = self.value_proj(feats).reshape(m, self.k, -1)
        alpha_b = ops.broadcast_to(ops.reshape(alpha, (m, self.k, 1)),
                                   vals.shape)
        mixed = ops.sum(ops.multiply(alpha_b, vals), axis=1)
        return ops.add(queries, self.output_proj(mixed))


@dataclass
class LayerPrediction:
    """Batched per-layer head output over all M queries."""

    scores: DiffArray        # (M, 3) sigmoid class scores
    points: DiffArray        # (M, N, 2) in output-space units
    sigmas: DiffArray        # (M, N, 2) positive Laplace scales
    points_norm: DiffArray   # (M, N, 2) in [0,1]^2


@dataclass(frozen=True)
class ElementPrediction:
    """One decoded element, detached for evaluation and serialization."""

    scores: np.ndarray       # (3,)
    points: np.ndarray       # (N, 2)
    sigmas: np.ndarray       # (N, 2)
    query_index: int

    def to_dict(self) -> dict:
        return {
            "scores": self.scores.tolist(),
            "points": self.points.tolist(),
            "sigmas": self.sigmas.tolist(),
            "query_index": self.query_index,
        }


def layer_to_elements(pred: LayerPrediction) -> List[ElementPrediction]:
    m = pred.scores.shape[0]
    return [
        ElementPrediction(
            scores=pred.scores.values[i].copy(),
            points=pred.points.values[i].copy(),
            sigmas=pred.sigmas.values[i].copy(),
            query_index=i,
        )
        for i in range(m)
    ]


class UAHead(Module):
    """Query -> N point locations, Laplace scales, and class scores."""

    def __init__(self, dim: int, n_points: int, space: SpaceSpec,
                 rng: np.random.Generator, n_classes: int = 3):
        self.n_points = n_points
        self.space = space
        self.point_mlp = MLP([dim, dim, n_points * 2], rng)
        self.scale_mlp = MLP([dim, dim, n_points * 2], rng)
        self.class_mlp = MLP([dim, dim, n_classes], rng)

    def __call__(self, queries: DiffArray) -> LayerPrediction:
        check_finite("queries", queries.values)
        m = queries.shape[0]
        n = self.n_points
        pts_norm = ops.sigmoid(self.point_mlp(queries)).reshape(m, n, 2)
        points = self.space.denormalize(pts_norm)
        sigmas = ops.clip(ops.exp(self.scale_mlp(queries)),
                          HEAD_SIGMA_LO, HEAD_SIGMA_HI).reshape(m, n, 2)
        scores = ops.sigmoid(self.class_mlp(queries))
        return LayerPrediction(scores=scores, points=points, sigmas=sigmas,
                               points_norm=pts_norm)


class DecoderLayer(Module):
    def __init__(self, dim: int, feat_dim: int, k: int, ffn_hidden: int,
                 space: SpaceSpec, rng: np.random.Generator):
        self.self_attn = SelfAttention(dim, rng)
        self.cross_attn = UAAttention(dim, feat_dim, k, space, rng)
        self.ffn = FFN(dim, ffn_hidden, rng)

    def __call__(self, queries, refs, grid, mode, rng):
        x = self.self_attn(queries)
        x = self.cross_attn(x, refs, grid, mode, rng)
        return self.ffn(x)


class Decoder(Module):
    """L decoder layers with a shared head and learned queries/references.

    Reference points start from learned logits and update to each layer's
    predicted centroid (normalized, detached so localization gradients flow
    through the head rather than the reference path).
    """

    def __init__(self, n_queries: int, dim: int, n_points: int, k: int,
                 n_layers: int, feat_dim: int, space: SpaceSpec,
                 rng: np.random.Generator, ffn_hidden: Optional[int] = None):
        if n_queries < 1 or n_layers < 1:
            raise ContractViolation("need >= 1 query and >= 1 layer")
        ffn_hidden = ffn_hidden or 2 * dim
        self.space = space
        self.query_embed = parameter(rng.normal(0.0, 0.5, (n_queries, dim)))
        self.ref_logits = parameter(rng.normal(0.0, 0.5, (n_queries, 2)))
        self.layers = [DecoderLayer(dim, feat_dim, k, ffn_hidden, space, rng)
                       for _ in range(n_layers)]
        self.head = UAHead(dim, n_points, space, rng)

    def initial_queries(self) -> DiffArray:
        return self.query_embed

    def initial_refs(self) -> DiffArray:
        return ops.sigmoid(self.ref_logits)

    def forward(self, grid, queries: Optional[DiffArray] = None,
                refs: Optional[DiffArray] = None, mode: str = "sample",
                rng: Optional[np.random.Generator] = None
                ) -> List[LayerPrediction]:
        """Run all layers; returns one LayerPrediction per layer (deep
        supervision order, last entry is the final prediction)."""
        grid = as_diff(grid)
        x = queries if queries is not None else self.initial_queries()
        refs = refs if refs is not None else self.initial_refs()
        outputs: List[LayerPrediction] = []
        for layer in self.layers:
            x = layer(x, refs, grid, mode, rng)
            pred = self.head(x)
            outputs.append(pred)
            centroid = ops.mean(pred.points_norm, axis=1)   # (M, 2)
            refs = centroid.detach()
        return outputs
