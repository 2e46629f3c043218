"""Run configuration, model assembly, and the two trainable estimators.

``PVDetector`` learns polylines on perspective-view feature grids;
``MapVectorizer`` is the full model: projected BEV features, optional
prompt construction and injection, the uncertainty-aware decoder, and
distillation into the mimic pool.  Both follow the fit/predict estimator
convention with ``get_params``/``set_params`` and JSON checkpoints.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import time
import warnings
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .decoder import (Decoder, ElementPrediction, LayerPrediction, SpaceSpec,
                      layer_to_elements)
from .diffcore import Tape, as_diff, ops
from .diffcore.checkpoint import load_checkpoint, save_checkpoint
from .diffcore.nn import Linear, Module
from .diffcore.optim import Adam, clip_grad_norm, cosine_lr
from .distill import MimicPool, mimic_prompts
from .losses import GtElement, LossWeights, total_loss
from .metrics import APResult, PredTuple, map_metric, scene_ground_truth
from .prompts import (InjectionBlock, PVInstance, PVPromptSet, build_prompts,
                      inject_bev_features, inject_map_queries,
                      select_candidates)
from .scenes import (FeatureGrids, GenerationConfig, Scene, noise_seed_for,
                     pv_ground_truth, rasterize_features)
from .validation import (ConfigurationError, ContractViolation,
                         NumericalError, check_fitted)

INFERENCE_MODES = ("full", "mimic")

# Names of the boolean toggles on RunConfig, in ablation-table order.
FLAG_NAMES = ("ua_attention", "ua_head", "pv_prompts", "inject_bev",
              "inject_queries", "mimic", "pretrained_pv")


def _generation_config_to_dict(cfg: GenerationConfig) -> dict:
    return dataclasses.asdict(cfg)


_TUPLE_FIELDS = ("x_range", "y_range", "bev_shape", "pv_shape")


def _generation_config_from_dict(d: dict) -> GenerationConfig:
    kwargs = dict(d)
    for key in _TUPLE_FIELDS:
        if key in kwargs:
            kwargs[key] = tuple(kwargs[key])
    try:
        return GenerationConfig(**kwargs)
    except TypeError as exc:
        raise ConfigurationError(f"bad scene config: {exc}") from exc


@dataclass(frozen=True)
class RunConfig:
    """Everything a run needs; hashable into a provenance digest.

    ``scene`` carries generation and rasterization parameters (including
    the per-element point count N, which the decoders reuse).  Boolean
    flags gate the model's optional mechanisms independently.
    """

    seed: int = 0
    # dataset
    n_train: int = 200
    n_val: int = 50
    split: str = "region"
    split_ratio: float = 0.8
    degrade_train: float = 0.0
    degrade_val: float = 0.3
    scene: GenerationConfig = field(default_factory=GenerationConfig)
    # main model dimensions (full-scale reference: 100 queries, dim 256)
    n_queries: int = 20
    d_model: int = 64
    n_layers: int = 3
    k_samples: int = 8
    n_mimic: int = 20
    d_prompt: int = 32
    # perspective-view branch
    pv_dim: int = 32
    pv_queries: int = 8
    pv_layers: int = 2
    pv_k: int = 4
    pv_points: int = 10
    pv_steps: int = 800
    pv_lr: float = 3e-3
    # loss weights and candidate threshold
    lambda_pts: float = 50.0
    lambda_cls: float = 5.0
    lambda_nll: float = 0.05
    lambda_distill: float = 10.0
    nll_last_layer_only: bool = False
    c_thr: float = 0.4
    prompt_omega_global: bool = False
    # optimizer
    steps: int = 2000
    lr: float = 4e-4
    grad_clip: float = 5e4
    # feature flags
    ua_attention: bool = True
    ua_head: bool = True
    pv_prompts: bool = True
    inject_bev: bool = True
    inject_queries: bool = True
    mimic: bool = True
    pretrained_pv: bool = True
    # inference
    mode: str = "full"

    @property
    def n_points(self) -> int:
        return self.scene.n_points

    def validate(self) -> "RunConfig":
        for name in ("lambda_pts", "lambda_cls", "lambda_nll",
                     "lambda_distill"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be >= 0")
        for name in ("n_train", "n_val", "n_queries", "d_model", "n_layers",
                     "k_samples", "n_mimic", "d_prompt", "pv_dim",
                     "pv_queries", "pv_layers", "pv_k", "pv_points", "steps",
                     "pv_steps"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1")
        if self.mode not in INFERENCE_MODES:
            raise ConfigurationError(
                f"mode must be one of {INFERENCE_MODES}, got {self.mode!r}")
        if not 0.0 <= self.c_thr <= 1.0:
            raise ConfigurationError(f"c_thr must be in [0, 1], got {self.c_thr}")
        for name in ("degrade_train", "degrade_val"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigurationError(f"{name} must be in [0, 1]")
        if self.lr <= 0 or self.pv_lr <= 0:
            raise ConfigurationError("learning rates must be positive")
        if self.grad_clip < 0:
            raise ConfigurationError("grad_clip must be >= 0 (0 disables)")
        if self.d_prompt % 2 != 0:
            raise ConfigurationError("d_prompt must be even")
        return self

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["scene"] = _generation_config_to_dict(self.scene)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        kwargs = dict(d)
        if "scene" in kwargs:
            kwargs["scene"] = _generation_config_from_dict(kwargs["scene"])
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(kwargs) - names)
        if unknown:
            raise ConfigurationError(f"unknown config keys: {unknown}")
        return cls(**kwargs)

    def config_hash(self) -> str:
        """sha256 over the canonical JSON form; stamped on every artifact."""
        blob = json.dumps(self.to_dict(), sort_keys=True,
                          separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def flags(self) -> Dict[str, bool]:
        return {name: getattr(self, name) for name in FLAG_NAMES}


def loss_weights_for(cfg: RunConfig) -> LossWeights:
    """Loss weights with the scale-head term gated by its flag."""
    return LossWeights(
        lambda_pts=cfg.lambda_pts,
        lambda_cls=cfg.lambda_cls,
        lambda_nll=cfg.lambda_nll if cfg.ua_head else 0.0,
        lambda_distill=cfg.lambda_distill,
        nll_last_layer_only=cfg.nll_last_layer_only,
    )


# -- model containers ---------------------------------------------------------


class MapModel(Module):
    """Learned components of the full network.

    ``bev_proj`` lifts raw rasterized channels to model width so prompt
    injection and decoding share one feature map.
    """

    def __init__(self, cfg: RunConfig, rng: np.random.Generator):
        space = SpaceSpec.bev(cfg.scene.x_range, cfg.scene.y_range)
        c_bev = cfg.scene.bev_shape[2]
        self.space = space
        self.d_model = cfg.d_model
        self.bev_proj = Linear(c_bev, cfg.d_model, rng)
        self.decoder = Decoder(cfg.n_queries, cfg.d_model, cfg.scene.n_points,
                               cfg.k_samples, cfg.n_layers, cfg.d_model,
                               space, rng)
        self.injection = InjectionBlock(cfg.d_model, cfg.d_prompt, rng)
        self.pool = MimicPool(cfg.n_mimic, cfg.d_prompt, rng)

    def project_bev(self, bev: np.ndarray):
        h, w, c = bev.shape
        flat = self.bev_proj(as_diff(bev.reshape(h * w, c)))
        return ops.reshape(flat, (h, w, self.d_model))


class _PVModel(Module):
    def __init__(self, c_feat: int, dim: int, n_queries: int, n_points: int,
                 k: int, n_layers: int, space: SpaceSpec,
                 rng: np.random.Generator):
        self.dim = dim
        self.proj = Linear(c_feat, dim, rng)
        self.decoder = Decoder(n_queries, dim, n_points, k, n_layers, dim,
                               space, rng)

    def forward(self, grid: np.ndarray, mode: str = "mean",
                rng: Optional[np.random.Generator] = None
                ) -> List[LayerPrediction]:
        h, w, c = grid.shape
        flat = self.proj(as_diff(grid.reshape(h * w, c)))
        f = ops.reshape(flat, (h, w, self.dim))
        return self.decoder.forward(f, mode=mode, rng=rng)


def _write_log(path: Optional[str], header: dict, rows: List[dict]) -> None:
    if path is None:
        return
    with open(path, "w") as f:
        f.write(json.dumps(header) + "\n")
        for row in rows:
            f.write(json.dumps(row) + "\n")


def elements_to_predictions(elements: Sequence[ElementPrediction]
                            ) -> List[PredTuple]:
    """Each decoded element scored by its best class."""
    out: List[PredTuple] = []
    for e in elements:
        class_id = int(np.argmax(e.scores))
        out.append((class_id, float(e.scores[class_id]), e.points))
    return out


# -- perspective-view detector -------------------------------------------------


class PVDetector:
    """Polyline detector over one camera's rasterized feature grid.

    One model is shared across all cameras in the rig (they share image
    geometry).  ``fit`` trains on projected ground-truth polylines;
    ``predict`` emits per-camera instance lists ready for prompt building.
    """

    def __init__(self, dim: int = 32, n_queries: int = 8, n_layers: int = 2,
                 k_samples: int = 4, n_points: int = 10, steps: int = 600,
                 lr: float = 3e-4, grad_clip: float = 5e4, seed: int = 0):
        self.dim = dim
        self.n_queries = n_queries
        self.n_layers = n_layers
        self.k_samples = k_samples
        self.n_points = n_points
        self.steps = steps
        self.lr = lr
        self.grad_clip = grad_clip
        self.seed = seed
        self.model_: Optional[_PVModel] = None
        self.fitted_ = False
        self.history_: List[dict] = []

    _PARAM_NAMES = ("dim", "n_queries", "n_layers", "k_samples", "n_points",
                    "steps", "lr", "grad_clip", "seed")

    def get_params(self, deep: bool = True) -> dict:
        return {name: getattr(self, name) for name in self._PARAM_NAMES}

    def set_params(self, **params) -> "PVDetector":
        for name, value in params.items():
            if name not in self._PARAM_NAMES:
                raise ConfigurationError(f"unknown parameter {name!r}")
            setattr(self, name, value)
        return self

    @classmethod
    def from_config(cls, cfg: RunConfig) -> "PVDetector":
        return cls(dim=cfg.pv_dim, n_queries=cfg.pv_queries,
                   n_layers=cfg.pv_layers, k_samples=cfg.pv_k,
                   n_points=cfg.pv_points, steps=cfg.pv_steps,
                   lr=cfg.pv_lr, grad_clip=cfg.grad_clip, seed=cfg.seed)

    def init(self, scene_cfg: GenerationConfig) -> "PVDetector":
        """Build model weights deterministically from the seed, untrained."""
        rng = np.random.default_rng(self.seed)
        self.space_ = SpaceSpec.pv(scene_cfg.cam_width, scene_cfg.cam_height_px)
        self.scene_cfg_ = scene_cfg
        self.model_ = _PVModel(scene_cfg.pv_shape[2], self.dim,
                               self.n_queries, self.n_points, self.k_samples,
                               self.n_layers, self.space_, rng)
        self.fitted_ = False
        return self

    def fit(self, scenes: Sequence[Scene],
            scene_cfg: Optional[GenerationConfig] = None,
            log_path: Optional[str] = None,
            log_meta: Optional[dict] = None,
            weights: Optional[LossWeights] = None) -> "PVDetector":
        scenes = list(scenes)
        if not scenes:
            raise ConfigurationError("no scenes to fit on")
        self.init(scene_cfg or GenerationConfig())

        samples: List[Tuple[np.ndarray, List[GtElement]]] = []
        for scene in scenes:
            grids = rasterize_features(scene, noise_seed_for(scene.scene_id),
                                       self.scene_cfg_)
            for cam in scene.cameras:
                gts = [(cid, line.points) for cid, line in
                       pv_ground_truth(scene, cam, self.n_points)]
                if gts:
                    samples.append((grids.pv[cam.name], gts))
        if not samples:
            raise ConfigurationError(
                "no projected ground truth visible in any camera")

        weights = weights or LossWeights()
        ss = np.random.SeedSequence(self.seed)
        order_rng, draw_rng = (np.random.default_rng(c) for c in ss.spawn(2))
        opt = Adam(self.model_.parameters(), lr=self.lr)
        order = order_rng.permutation(len(samples))
        pos = 0
        self.history_ = []
        for step in range(self.steps):
            if pos == len(order):
                order = order_rng.permutation(len(samples))
                pos = 0
            grid, gts = samples[order[pos]]
            pos += 1
            opt.lr = cosine_lr(self.lr, step, self.steps)
            with Tape() as tape:
                preds = self.model_.forward(grid, mode="sample", rng=draw_rng)
                loss, parts = total_loss(preds, gts, weights)
                tape.backward(loss)
            clip_grad_norm(opt.params, self.grad_clip)
            opt.step()
            opt.zero_grad()
            if not np.isfinite(parts["total"]):
                raise NumericalError(f"non-finite loss at step {step}")
            self.history_.append({"step": step, "lr": opt.lr, **parts})
        self.fitted_ = True
        _write_log(log_path, {"kind": "pv_train_log", **(log_meta or {})},
                   self.history_)
        return self

    def predict(self, scene: Scene, grids: Optional[FeatureGrids] = None
                ) -> Dict[str, List[PVInstance]]:
        check_fitted(self, "model_")
        if grids is None:
            grids = rasterize_features(scene, noise_seed_for(scene.scene_id),
                                       self.scene_cfg_)
        out: Dict[str, List[PVInstance]] = {}
        for cam in scene.cameras:
            preds = self.model_.forward(grids.pv[cam.name], mode="mean")
            out[cam.name] = [
                PVInstance(camera=cam.name, scores=e.scores, points=e.points,
                           sigmas=e.sigmas)
                for e in layer_to_elements(preds[-1])
            ]
        return out

    def save(self, path: str, extra_meta: Optional[dict] = None) -> None:
        check_fitted(self, "model_")
        meta = {
            "kind": "pv_detector",
            "params": self.get_params(),
            "fitted": bool(self.fitted_),
            "scene_config": _generation_config_to_dict(self.scene_cfg_),
        }
        if extra_meta:
            meta.update(extra_meta)
        save_checkpoint(path, self.model_.state_dict(), meta)

    @classmethod
    def load(cls, path: str) -> "PVDetector":
        state, meta = load_checkpoint(path)
        if meta.get("kind") != "pv_detector":
            raise ConfigurationError(
                f"{path}: not a PV detector checkpoint")
        est = cls(**meta["params"])
        est.init(_generation_config_from_dict(meta["scene_config"]))
        est.model_.load_state_dict(state)
        est.fitted_ = bool(meta["fitted"])
        return est


# -- full model ----------------------------------------------------------------


class MapVectorizer:
    """End-to-end vectorized map estimator.

    fit() trains the decoder (and, when enabled, prompt construction,
    injection, and the mimic pool) on scenes; predict() decodes one scene
    into classed, scored polylines with per-point scales.  ``mode``
    selects the prompt source at inference: "full" runs the PV branch,
    "mimic" swaps in the learned pool and never touches PV inputs.
    """

    def __init__(self, config: Optional[RunConfig] = None, **overrides):
        config = config or RunConfig()
        if overrides:
            try:
                config = replace(config, **overrides)
            except TypeError as exc:
                raise ConfigurationError(str(exc)) from exc
        self.config = config.validate()
        self.model_: Optional[MapModel] = None
        self.pv_: Optional[PVDetector] = None
        self.history_: List[dict] = []
        self.fit_seconds_: Optional[float] = None

    def get_params(self, deep: bool = True) -> dict:
        return self.config.to_dict()

    def set_params(self, **params) -> "MapVectorizer":
        merged = self.config.to_dict()
        unknown = sorted(set(params) - set(merged))
        if unknown:
            raise ConfigurationError(f"unknown parameter(s): {unknown}")
        merged.update(params)
        self.config = RunConfig.from_dict(merged).validate()
        return self

    # -- training -------------------------------------------------------------

    def fit(self, scenes: Sequence[Scene],
            pv_detector: Optional[PVDetector] = None,
            log_path: Optional[str] = None) -> "MapVectorizer":
        cfg = self.config.validate()
        scenes = list(scenes)
        if not scenes:
            raise ConfigurationError("no scenes to fit on")

        ss = np.random.SeedSequence(cfg.seed)
        init_rng, order_rng, draw_rng = (np.random.default_rng(c)
                                         for c in ss.spawn(3))
        self.model_ = MapModel(cfg, init_rng)
        self.pv_ = self._resolve_pv(pv_detector)
        if cfg.mimic and not cfg.pv_prompts:
            warnings.warn("mimic training is inactive without the prompt "
                          "branch; the pool will stay untrained",
                          RuntimeWarning)

        # Per-scene constants: feature grids, ground truth, and the frozen
        # PV branch's selected instances (teacher side of distillation).
        grids_by_id: Dict[str, FeatureGrids] = {}
        gts_by_id: Dict[str, List[GtElement]] = {}
        teacher_by_id: Dict[str, List[PVInstance]] = {}
        for scene in scenes:
            grids = rasterize_features(scene, noise_seed_for(scene.scene_id),
                                       cfg.scene, cfg.degrade_train)
            grids_by_id[scene.scene_id] = grids
            gts_by_id[scene.scene_id] = [(e.class_id, e.line.points)
                                         for e in scene.elements]
            if cfg.pv_prompts:
                per_cam = self.pv_.predict(scene, grids=grids)
                flat = [inst for cam in scene.cameras
                        for inst in per_cam[cam.name]]
                teacher_by_id[scene.scene_id] = select_candidates(
                    flat, cfg.c_thr)

        weights = loss_weights_for(cfg)
        distill = cfg.mimic and cfg.pv_prompts
        opt = Adam(self.model_.parameters(), lr=cfg.lr)
        order = order_rng.permutation(len(scenes))
        pos = 0
        self.history_ = []
        t0 = time.perf_counter()
        for step in range(cfg.steps):
            if pos == len(order):
                order = order_rng.permutation(len(scenes))
                pos = 0
            scene = scenes[order[pos]]
            pos += 1
            opt.lr = cosine_lr(cfg.lr, step, cfg.steps)
            with Tape() as tape:
                prompts = None
                if cfg.pv_prompts:
                    prompts = build_prompts(
                        teacher_by_id[scene.scene_id], scene.cameras,
                        self.model_.pool.queries, self.model_.injection,
                        self.model_.space,
                        omega_global=cfg.prompt_omega_global)
                preds = self._decode(grids_by_id[scene.scene_id], prompts,
                                     attn_mode="sample", rng=draw_rng)
                loss, parts = total_loss(
                    preds, gts_by_id[scene.scene_id], weights,
                    prompts=prompts if distill else None,
                    pool=self.model_.pool if distill else None)
                tape.backward(loss)
            clip_grad_norm(opt.params, cfg.grad_clip)
            opt.step()
            opt.zero_grad()
            if not np.isfinite(parts["total"]):
                raise NumericalError(f"non-finite loss at step {step}")
            self.history_.append({"step": step, "lr": opt.lr, **parts})

        if distill:
            self.model_.pool.trained = True
        self.fit_seconds_ = time.perf_counter() - t0
        _write_log(log_path,
                   {"kind": "train_log", "config_hash": cfg.config_hash()},
                   self.history_)
        return self

    def _resolve_pv(self, pv_detector: Optional[PVDetector]
                    ) -> Optional[PVDetector]:
        cfg = self.config
        if not cfg.pv_prompts:
            return None
        if pv_detector is not None:
            if pv_detector.model_ is None:
                raise ConfigurationError("PV detector has no weights; call "
                                         "fit() or init() first")
            if cfg.pretrained_pv and not pv_detector.fitted_:
                raise ConfigurationError(
                    "pretrained_pv is set but the PV detector is untrained")
            return pv_detector
        if cfg.pretrained_pv:
            raise ConfigurationError(
                "prompts with pretrained_pv need a fitted PV detector; "
                "pass pv_detector= or disable the flag")
        return PVDetector.from_config(cfg).init(cfg.scene)

    # -- inference ------------------------------------------------------------

    def _decode(self, grids: FeatureGrids, prompts: Optional[PVPromptSet],
                attn_mode: str, rng: Optional[np.random.Generator]
                ) -> List[LayerPrediction]:
        cfg = self.config
        f_bev = self.model_.project_bev(grids.bev)
        queries = None
        if prompts is not None and not prompts.is_empty:
            if cfg.inject_bev:
                f_bev = inject_bev_features(f_bev, prompts,
                                            self.model_.injection)
            if cfg.inject_queries:
                queries = inject_map_queries(
                    self.model_.decoder.initial_queries(), prompts,
                    self.model_.injection)
        if not cfg.ua_attention:
            attn_mode = "mean"
        return self.model_.decoder.forward(f_bev, queries=queries,
                                           mode=attn_mode, rng=rng)

    def _prompts_for(self, scene: Scene, grids: FeatureGrids, mode: str
                     ) -> Optional[PVPromptSet]:
        cfg = self.config
        if not cfg.pv_prompts:
            return None
        if mode == "mimic":
            return mimic_prompts(self.model_.pool, self.model_.injection)
        per_cam = self.pv_.predict(scene, grids=grids)
        flat = [inst for cam in scene.cameras for inst in per_cam[cam.name]]
        return build_prompts(select_candidates(flat, cfg.c_thr),
                             scene.cameras, self.model_.pool.queries,
                             self.model_.injection, self.model_.space,
                             omega_global=cfg.prompt_omega_global)

    def predict(self, scene: Scene, mode: Optional[str] = None,
                degrade_fraction: float = 0.0) -> List[ElementPrediction]:
        check_fitted(self, "model_")
        cfg = self.config
        mode = mode or cfg.mode
        if mode not in INFERENCE_MODES:
            raise ConfigurationError(
                f"mode must be one of {INFERENCE_MODES}, got {mode!r}")
        grids = rasterize_features(scene, noise_seed_for(scene.scene_id),
                                   cfg.scene, degrade_fraction)
        prompts = self._prompts_for(scene, grids, mode)
        preds = self._decode(grids, prompts, attn_mode="mean", rng=None)
        return layer_to_elements(preds[-1])

    def evaluate(self, scenes: Sequence[Scene], mode: Optional[str] = None,
                 degrade_fraction: float = 0.0) -> APResult:
        preds_by_scene = []
        gts_by_scene = []
        for scene in scenes:
            elements = self.predict(scene, mode=mode,
                                    degrade_fraction=degrade_fraction)
            preds_by_scene.append(elements_to_predictions(elements))
            gts_by_scene.append(scene_ground_truth(scene))
        return map_metric(preds_by_scene, gts_by_scene)

    def score(self, scenes: Sequence[Scene], mode: Optional[str] = None,
              degrade_fraction: float = 0.0) -> float:
        return self.evaluate(scenes, mode=mode,
                             degrade_fraction=degrade_fraction).mAP

    # -- persistence ----------------------------------------------------------

    def save(self, path: str, extra_meta: Optional[dict] = None) -> None:
        check_fitted(self, "model_")
        state = self.model_.state_dict()
        meta = {
            "kind": "map_vectorizer",
            "config": self.config.to_dict(),
            "config_hash": self.config.config_hash(),
            "pool_trained": bool(self.model_.pool.trained),
            "pv": None,
        }
        if self.pv_ is not None:
            for name, values in self.pv_.model_.state_dict().items():
                state[f"pv.{name}"] = values
            meta["pv"] = {"params": self.pv_.get_params(),
                          "fitted": bool(self.pv_.fitted_)}
        if extra_meta:
            meta.update(extra_meta)
        save_checkpoint(path, state, meta)

    @classmethod
    def load(cls, path: str) -> "MapVectorizer":
        state, meta = load_checkpoint(path)
        if meta.get("kind") != "map_vectorizer":
            raise ConfigurationError(f"{path}: not a vectorizer checkpoint")
        cfg = RunConfig.from_dict(meta["config"])
        est = cls(cfg)
        est.model_ = MapModel(cfg, np.random.default_rng(cfg.seed))
        own = {k: v for k, v in state.items() if not k.startswith("pv.")}
        est.model_.load_state_dict(own)
        est.model_.pool.trained = bool(meta.get("pool_trained", False))
        if meta.get("pv") is not None:
            pv = PVDetector(**meta["pv"]["params"])
            pv.init(cfg.scene)
            pv.model_.load_state_dict(
                {k[len("pv."):]: v for k, v in state.items()
                 if k.startswith("pv.")})
            pv.fitted_ = bool(meta["pv"]["fitted"])
            est.pv_ = pv
        return est
