"""Synthetic world generation and geo-disjoint splitting.

A scene is a small vector map (dividers, boundaries, pedestrian crossings)
placed at a world offset, observed by a fixed two-camera rig.  Proxy
features are distance transforms of the map geometry rather than rendered
images: they carry exactly the geometric signal the decoders consume.

Scenes cluster in the world plane with a guaranteed margin to 200 m tile
borders, so tile-level splits are disjoint by construction (no val scene
within 30 m of a train scene) while scenes inside one cluster often do fall
within 30 m of each other, giving random splits a nonzero overlap ratio.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .geometry import (
    FRAME_EGO,
    FRAME_PIXEL,
    CameraModel,
    Polyline2D,
    make_camera,
    project_ego_to_pv,
    resample_polyline,
)
from .validation import (
    ContractViolation,
    GenerationError,
    SplitError,
    as_float_array,
)

CLASS_NAMES = ("ped_crossing", "divider", "boundary")

# element counts contributed by each road template
TEMPLATE_ELEMENTS: Dict[str, Dict[str, int]] = {
    "straight-2-lane": {"divider": 2, "boundary": 2},
    "curved-2-lane": {"divider": 2, "boundary": 2},
    "intersection": {"divider": 2, "boundary": 4, "ped_crossing": 2},
}


@dataclass(frozen=True)
class GenerationConfig:
    n_points: int = 20
    x_range: Tuple[float, float] = (-15.0, 15.0)
    y_range: Tuple[float, float] = (-30.0, 30.0)
    template_mix: Dict[str, float] = field(default_factory=lambda: {
        "straight-2-lane": 0.35,
        "curved-2-lane": 0.35,
        "intersection": 0.30,
    })
    # world layout
    world_seed: int = 777
    n_clusters: int = 6
    cluster_spread: float = 12.0   # uniform +/- around the cluster center
    tile_size: float = 200.0
    tile_margin: float = 16.0      # keeps cross-tile scene pairs > 30 m apart
    world_tiles: int = 10          # world spans world_tiles x world_tiles tiles
    # camera rig
    cam_pitch: float = 0.30
    cam_height: float = 1.6
    cam_focal: float = 120.0
    cam_width: int = 200
    cam_height_px: int = 120
    # rasterization
    bev_shape: Tuple[int, int, int] = (25, 50, 32)
    pv_shape: Tuple[int, int, int] = (12, 20, 16)
    dt_clamp: float = 5.0          # meters
    pv_dt_clamp: float = 25.0      # pixels
    noise_sigma: float = 0.25
    pv_points: int = 10            # points per projected ground-truth instance


@dataclass(frozen=True)
class MapElement:
    element_id: int
    class_name: str
    line: Polyline2D

    def __post_init__(self):
        if self.class_name not in CLASS_NAMES:
            raise ContractViolation(f"unknown class {self.class_name!r}")
        if self.line.frame != FRAME_EGO:
            raise ContractViolation("map elements must be ego-frame")

    @property
    def class_id(self) -> int:
        return CLASS_NAMES.index(self.class_name)


@dataclass(frozen=True)
class Scene:
    scene_id: str
    region_id: str
    world_offset: np.ndarray
    cameras: List[CameraModel]
    elements: List[MapElement]

    def __post_init__(self):
        if not self.cameras:
            raise ContractViolation("scene needs a non-empty camera rig")
        if not self.elements:
            raise ContractViolation("scene needs at least one element")
        off = as_float_array("world_offset", self.world_offset, shape=(2,))
        off.setflags(write=False)
        object.__setattr__(self, "world_offset", off)

    def to_dict(self) -> dict:
        return {
            "scene_id": self.scene_id,
            "region_id": self.region_id,
            "world_offset": [float(self.world_offset[0]), float(self.world_offset[1])],
            "cameras": [c.to_dict() for c in self.cameras],
            "elements": [
                {"class": e.class_name, "points": e.line.points.tolist()}
                for e in self.elements
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Scene":
        return cls(
            scene_id=d["scene_id"],
            region_id=d["region_id"],
            world_offset=np.asarray(d["world_offset"], dtype=np.float64),
            cameras=[CameraModel.from_dict(c) for c in d["cameras"]],
            elements=[
                MapElement(i, e["class"],
                           Polyline2D(np.asarray(e["points"]), FRAME_EGO))
                for i, e in enumerate(d["elements"])
            ],
        )


def region_for_offset(offset, tile_size: float) -> str:
    tx = int(np.floor(offset[0] / tile_size))
    ty = int(np.floor(offset[1] / tile_size))
    return f"r{tx}_{ty}"


def city_for_region(region_id: str) -> str:
    """Super-group of 3x3 tiles; the coarse unit for city-style splits."""
    tx, ty = (int(v) for v in region_id[1:].split("_"))
    return f"c{tx // 3}_{ty // 3}"


def noise_seed_for(scene_id: str) -> int:
    """Stable per-scene seed for feature noise, derived from the id alone."""
    return zlib.crc32(scene_id.encode())


def build_rig(cfg: GenerationConfig) -> List[CameraModel]:
    """Two cameras along the long (y) axis of the perception range."""
    common = dict(pitch=cfg.cam_pitch, height=cfg.cam_height,
                  focal=cfg.cam_focal, width=cfg.cam_width,
                  height_px=cfg.cam_height_px)
    return [
        make_camera("front", yaw=np.pi / 2, **common),
        make_camera("back", yaw=-np.pi / 2, **common),
    ]


# -- template geometry -------------------------------------------------------


def _dense_line(xs, ys) -> np.ndarray:
    return np.column_stack([xs, ys])


def _road_lines(center_x: float, amp: float, wavelength: float, phase: float,
                y_lo: float, y_hi: float, offsets: Sequence[float]) -> List[np.ndarray]:
    """Parallel curves x(y) = center + offset + amp*sin(...) sampled densely."""
    y = np.linspace(y_lo, y_hi, 200)
    base = center_x + amp * np.sin(2.0 * np.pi * y / wavelength + phase)
    return [_dense_line(base + off, y) for off in offsets]


def _rectangle(cx: float, cy: float, half_w: float, half_h: float) -> np.ndarray:
    """Closed perimeter trace (first point repeated at the end)."""
    corners = np.array([
        [cx - half_w, cy - half_h],
        [cx + half_w, cy - half_h],
        [cx + half_w, cy + half_h],
        [cx - half_w, cy + half_h],
        [cx - half_w, cy - half_h],
    ])
    pieces = []
    for a, b in zip(corners[:-1], corners[1:]):
        t = np.linspace(0.0, 1.0, 50, endpoint=False)[:, None]
        pieces.append(a + t * (b - a))
    pieces.append(corners[-1:])
    return np.vstack(pieces)


def _template_elements(name: str, rng: np.random.Generator,
                       cfg: GenerationConfig) -> List[Tuple[str, np.ndarray]]:
    y_lo, y_hi = cfg.y_range
    out: List[Tuple[str, np.ndarray]] = []
    if name == "straight-2-lane":
        c = rng.uniform(-4.0, 4.0)
        for off in (-2.0, 2.0):
            out.append(("divider", _dense_line(np.full(200, c + off),
                                               np.linspace(y_lo, y_hi, 200))))
        for off in (-6.0, 6.0):
            out.append(("boundary", _dense_line(np.full(200, c + off),
                                                np.linspace(y_lo, y_hi, 200))))
    elif name == "curved-2-lane":
        c = rng.uniform(-3.0, 3.0)
        amp = rng.uniform(2.0, 5.0)
        wavelength = rng.uniform(60.0, 120.0)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        div = _road_lines(c, amp, wavelength, phase, y_lo, y_hi, (-2.0, 2.0))
        bnd = _road_lines(c, amp, wavelength, phase, y_lo, y_hi, (-6.0, 6.0))
        out += [("divider", p) for p in div]
        out += [("boundary", p) for p in bnd]
    elif name == "intersection":
        ix = rng.uniform(-3.0, 3.0)
        iy = rng.uniform(-8.0, 8.0)
        x_lo, x_hi = cfg.x_range
        ys = np.linspace(y_lo, y_hi, 200)
        xs = np.linspace(x_lo, x_hi, 200)
        out.append(("divider", _dense_line(np.full(200, ix), ys)))
        out.append(("divider", _dense_line(xs, np.full(200, iy))))
        for off in (-6.0, 6.0):
            out.append(("boundary", _dense_line(np.full(200, ix + off), ys)))
            out.append(("boundary", _dense_line(xs, np.full(200, iy + off))))
        for sign in (-1.0, 1.0):
            cy = iy + sign * 9.0
            out.append(("ped_crossing", _rectangle(ix, cy, 6.0, 1.5)))
    else:
        raise GenerationError(f"unknown road template {name!r}")
    return out


def _uniform_chord_resample(dense: np.ndarray, n: int) -> Polyline2D:
    """Resample to n points whose chain has equal segment lengths.

    A single arc-length resample of a curved source leaves the n-point chain
    with unequal chords (chords shorten where the source bends), so the
    chain would move under a second resample.  Iterating the resample to its
    fixpoint makes stored elements exactly stable under resampling; shape
    drift is bounded by the corner-cutting of the first few passes (about
    6 cm on the sharpest template shape).
    """
    line = resample_polyline(Polyline2D(dense, FRAME_EGO), n)
    for _ in range(1000):
        new = resample_polyline(line, n)
        move = np.abs(new.points - line.points).max()
        line = new
        if move < 1e-13:
            break
    return line


def generate_scene(seed: int, cfg: GenerationConfig) -> Scene:
    """Deterministic scene from (seed, config).

    Cluster centers depend only on the config (world_seed), so every seed
    sees the same world layout; the per-scene rng picks a cluster, jitters
    the offset, chooses a template, and jitters its geometry.
    """
    mix = dict(cfg.template_mix)
    if not mix:
        raise GenerationError("template_mix is empty")
    for name in mix:
        if name not in TEMPLATE_ELEMENTS:
            raise GenerationError(f"unknown road template {name!r}")
    names = sorted(mix)
    probs = np.array([mix[n] for n in names], dtype=np.float64)
    if probs.sum() <= 0:
        raise GenerationError("template_mix has zero total probability")
    probs = probs / probs.sum()

    centers = _cluster_centers(cfg)
    rng = np.random.default_rng(seed)
    cluster = int(rng.integers(cfg.n_clusters))
    offset = centers[cluster] + rng.uniform(-cfg.cluster_spread,
                                            cfg.cluster_spread, 2)
    template = names[int(rng.choice(len(names), p=probs))]

    raw = _template_elements(template, rng, cfg)
    if not raw:
        raise GenerationError(f"template {template!r} produced no elements")
    elements = []
    for i, (cls, dense) in enumerate(raw):
        dense = np.clip(dense, [cfg.x_range[0], cfg.y_range[0]],
                        [cfg.x_range[1], cfg.y_range[1]])
        line = _uniform_chord_resample(dense, cfg.n_points)
        elements.append(MapElement(i, cls, line))

    scene_id = f"scene_{seed:06d}"
    return Scene(
        scene_id=scene_id,
        region_id=region_for_offset(offset, cfg.tile_size),
        world_offset=offset,
        cameras=build_rig(cfg),
        elements=elements,
    )


def _cluster_centers(cfg: GenerationConfig) -> np.ndarray:
    """Cluster centers clamped away from tile borders.

    Margin = tile_margin + cluster_spread per coordinate, so any two scenes
    in different tiles are separated by more than 2 * tile_margin > 30 m.
    """
    margin = cfg.tile_margin + cfg.cluster_spread
    if 2 * margin >= cfg.tile_size:
        raise GenerationError("tile_size too small for the required margins")
    rng = np.random.default_rng(cfg.world_seed)
    tiles = rng.integers(0, cfg.world_tiles, size=(cfg.n_clusters, 2))
    inner = rng.uniform(margin, cfg.tile_size - margin, size=(cfg.n_clusters, 2))
    return tiles * cfg.tile_size + inner


def generate_dataset(n_scenes: int, cfg: GenerationConfig,
                     base_seed: int = 0) -> List[Scene]:
    return [generate_scene(base_seed + i, cfg) for i in range(n_scenes)]


# -- rasterized proxy features -------------------------------------------------


@dataclass(frozen=True)
class FeatureGrids:
    """Distance-transform feature grids plus the cell-coordinate mapping."""

    bev: np.ndarray                      # (H, W, C), rows ~ x, cols ~ y
    pv: Dict[str, np.ndarray]            # camera name -> (h, w, C)
    x_range: Tuple[float, float]
    y_range: Tuple[float, float]
    pv_image_size: Dict[str, Tuple[int, int]]   # camera name -> (width, height)

    def ego_to_bev(self, points: np.ndarray) -> np.ndarray:
        """Ego (x, y) -> fractional grid-sample coords (col, row)."""
        h, w = self.bev.shape[:2]
        x0, x1 = self.x_range
        y0, y1 = self.y_range
        pts = np.asarray(points, dtype=np.float64)
        row = (pts[:, 0] - x0) / (x1 - x0) * h - 0.5
        col = (pts[:, 1] - y0) / (y1 - y0) * w - 0.5
        return np.column_stack([col, row])

    def pixel_to_pv(self, cam_name: str, pixels: np.ndarray) -> np.ndarray:
        """Image pixels -> fractional grid-sample coords on that PV grid."""
        h, w = self.pv[cam_name].shape[:2]
        width, height = self.pv_image_size[cam_name]
        pts = np.asarray(pixels, dtype=np.float64)
        col = pts[:, 0] / width * w - 0.5
        row = pts[:, 1] / height * h - 0.5
        return np.column_stack([col, row])


def _min_dist_to_segments(queries: np.ndarray, segs: np.ndarray) -> np.ndarray:
    """Min Euclidean distance from each query point to a set of segments."""
    if segs.shape[0] == 0:
        return np.full(queries.shape[0], np.inf)
    a = segs[:, 0]
    ab = segs[:, 1] - a
    den = (ab * ab).sum(axis=1)
    diff = queries[:, None, :] - a[None, :, :]
    num = (diff * ab[None, :, :]).sum(axis=2)
    t = np.clip(np.divide(num, den[None, :], out=np.zeros_like(num),
                          where=den[None, :] > 0), 0.0, 1.0)
    closest = a[None, :, :] + t[:, :, None] * ab[None, :, :]
    d = np.linalg.norm(queries[:, None, :] - closest, axis=2)
    return d.min(axis=1)


def _class_segments_ego(scene: Scene, class_name: str) -> np.ndarray:
    segs = []
    for e in scene.elements:
        if e.class_name != class_name:
            continue
        p = e.line.points
        segs.append(np.stack([p[:-1], p[1:]], axis=1))
    if not segs:
        return np.zeros((0, 2, 2))
    return np.concatenate(segs, axis=0)


def _bev_cell_centers(shape, x_range, y_range) -> np.ndarray:
    h, w = shape[:2]
    xs = x_range[0] + (np.arange(h) + 0.5) * (x_range[1] - x_range[0]) / h
    ys = y_range[0] + (np.arange(w) + 0.5) * (y_range[1] - y_range[0]) / w
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    return np.column_stack([gx.ravel(), gy.ravel()])


def _pv_cell_centers(shape, width, height) -> np.ndarray:
    h, w = shape[:2]
    us = (np.arange(w) + 0.5) * width / w
    vs = (np.arange(h) + 0.5) * height / h
    gv, gu = np.meshgrid(vs, us, indexing="ij")
    return np.column_stack([gu.ravel(), gv.ravel()])


def _pv_class_segments(scene: Scene, cam: CameraModel,
                       class_name: str) -> np.ndarray:
    """Image-space segments between consecutive validly projected points."""
    segs = []
    for e in scene.elements:
        if e.class_name != class_name:
            continue
        pix, valid = project_ego_to_pv(e.line, cam)
        p = pix.points
        keep = valid[:-1] & valid[1:]
        if keep.any():
            segs.append(np.stack([p[:-1][keep], p[1:][keep]], axis=1))
    if not segs:
        return np.zeros((0, 2, 2))
    return np.concatenate(segs, axis=0)


def rasterize_features(scene: Scene, noise_seed: int, cfg: GenerationConfig,
                       degrade_fraction: float = 0.0) -> FeatureGrids:
    """Distance-transform features for BEV and each camera image.

    BEV channels: one clamped distance transform per class (cell-center
    distance to the nearest element polyline of that class, clamped to
    dt_clamp; a class with no elements reads dt_clamp everywhere), then
    Gaussian noise channels.  PV grids mirror this in pixel units.

    ``degrade_fraction`` zeroes that fraction of BEV cells across all three
    distance channels.  A zeroed cell reads "element right here", so
    degradation injects misleading signal rather than blanks; PV grids are
    never degraded.  Deterministic in (scene, noise_seed): draws happen in a
    fixed order (BEV noise, per-camera PV noise, degradation mask).
    """
    if not 0.0 <= degrade_fraction <= 1.0:
        raise ContractViolation(
            f"degrade_fraction must be in [0, 1], got {degrade_fraction}"
        )
    rng = np.random.default_rng(noise_seed)
    h, w, c = cfg.bev_shape
    n_cls = len(CLASS_NAMES)
    if c <= n_cls:
        raise ContractViolation(f"bev channels must exceed {n_cls}, got {c}")

    centers = _bev_cell_centers(cfg.bev_shape, cfg.x_range, cfg.y_range)
    bev = np.empty((h, w, c))
    for k, cls in enumerate(CLASS_NAMES):
        d = _min_dist_to_segments(centers, _class_segments_ego(scene, cls))
        bev[:, :, k] = np.minimum(d, cfg.dt_clamp).reshape(h, w)
    bev[:, :, n_cls:] = rng.normal(0.0, cfg.noise_sigma, (h, w, c - n_cls))

    pv: Dict[str, np.ndarray] = {}
    sizes: Dict[str, Tuple[int, int]] = {}
    ph, pw, pc = cfg.pv_shape
    for cam in scene.cameras:
        pv_centers = _pv_cell_centers(cfg.pv_shape, cam.width, cam.height)
        grid = np.empty((ph, pw, pc))
        for k, cls in enumerate(CLASS_NAMES):
            d = _min_dist_to_segments(pv_centers,
                                      _pv_class_segments(scene, cam, cls))
            grid[:, :, k] = np.minimum(d, cfg.pv_dt_clamp).reshape(ph, pw)
        grid[:, :, n_cls:] = rng.normal(0.0, cfg.noise_sigma, (ph, pw, pc - n_cls))
        pv[cam.name] = grid
        sizes[cam.name] = (cam.width, cam.height)

    if degrade_fraction > 0.0:
        mask = rng.random(h * w) < degrade_fraction
        bev.reshape(h * w, c)[mask, :n_cls] = 0.0

    return FeatureGrids(bev=bev, pv=pv, x_range=cfg.x_range,
                        y_range=cfg.y_range, pv_image_size=sizes)


def pv_ground_truth(scene: Scene, cam: CameraModel,
                    n_points: int) -> List[Tuple[int, Polyline2D]]:
    """Projected map elements as image-space training targets.

    Each element contributes its longest run of validly projected points,
    resampled to ``n_points`` in pixel space; elements with no usable run
    (fewer than 2 consecutive valid points) are skipped.
    """
    out = []
    for e in scene.elements:
        pix, valid = project_ego_to_pv(e.line, cam)
        best: Optional[Tuple[int, int]] = None
        start = None
        for i, v in enumerate(np.append(valid, False)):
            if v and start is None:
                start = i
            elif not v and start is not None:
                if best is None or i - start > best[1] - best[0]:
                    best = (start, i)
                start = None
        if best is None or best[1] - best[0] < 2:
            continue
        run = pix.points[best[0]:best[1]]
        line = resample_polyline(Polyline2D(run, FRAME_PIXEL), n_points)
        out.append((e.class_id, line))
    return out


# -- dataset splitting -----------------------------------------------------------


@dataclass(frozen=True)
class SplitResult:
    train: List[str]
    val: List[str]
    overlap_ratio: float
    strategy: str

    def to_dict(self) -> dict:
        return {"train": list(self.train), "val": list(self.val),
                "overlap_ratio": self.overlap_ratio, "strategy": self.strategy}


def _overlap_ratio(train_scenes: Sequence[Scene],
                   val_scenes: Sequence[Scene], radius: float = 30.0) -> float:
    """Fraction of val scenes with any train scene within ``radius`` meters."""
    if not val_scenes:
        return 0.0
    if not train_scenes:
        return 0.0
    t = np.stack([s.world_offset for s in train_scenes])
    v = np.stack([s.world_offset for s in val_scenes])
    d = np.linalg.norm(v[:, None, :] - t[None, :, :], axis=2)
    return float((d.min(axis=1) <= radius).mean())


def split_geo(scenes: Sequence[Scene], strategy: str, ratio: float,
              seed: int = 0) -> SplitResult:
    """Partition scenes into train/val sets.

    ``ratio`` is the target train fraction.  Strategies: "region" assigns
    whole tiles, "city" assigns whole 3x3-tile super-groups, "random"
    ignores geography.  The returned overlap_ratio is the fraction of val
    scenes with any train scene within 30 m in the world frame.
    """
    if not scenes:
        raise SplitError("no scenes to split")
    if not 0.0 < ratio < 1.0:
        raise SplitError(f"ratio must be in (0, 1), got {ratio}")
    rng = np.random.default_rng(seed)
    by_id = {s.scene_id: s for s in scenes}

    if strategy == "random":
        ids = sorted(by_id)
        rng.shuffle(ids)
        k = max(1, min(len(ids) - 1, int(round(ratio * len(ids)))))
        train_ids, val_ids = ids[:k], ids[k:]
    elif strategy in ("region", "city"):
        def group_of(s: Scene) -> str:
            return s.region_id if strategy == "region" else city_for_region(s.region_id)

        groups: Dict[str, List[str]] = {}
        for s in scenes:
            groups.setdefault(group_of(s), []).append(s.scene_id)
        if len(groups) < 2:
            raise SplitError(
                f"{strategy} split needs >= 2 distinct groups, got {len(groups)}"
            )
        names = sorted(groups)
        rng.shuffle(names)
        train_ids, val_ids = [], []
        target = ratio * len(scenes)
        for name in names:
            members = sorted(groups[name])
            # fill train until the target count is met, rest goes to val
            if len(train_ids) + len(members) <= target or not train_ids:
                train_ids.extend(members)
            else:
                val_ids.extend(members)
        if not val_ids:
            # move the last group over so both sides are non-empty
            last = sorted(groups[names[-1]])
            train_ids = [i for i in train_ids if i not in last]
            val_ids = last
            if not train_ids:
                raise SplitError("cannot produce non-empty train and val sets")
    else:
        raise SplitError(f"unknown split strategy {strategy!r}")

    overlap = _overlap_ratio([by_id[i] for i in train_ids],
                             [by_id[i] for i in val_ids])
    return SplitResult(train=sorted(train_ids), val=sorted(val_ids),
                       overlap_ratio=overlap, strategy=strategy)
