import json
from collections import Counter

import numpy as np
import pytest

from uamap.geometry import FRAME_EGO, Polyline2D, resample_polyline
from uamap.scenes import (
    CLASS_NAMES,
    TEMPLATE_ELEMENTS,
    FeatureGrids,
    GenerationConfig,
    MapElement,
    Scene,
    _min_dist_to_segments,
    _overlap_ratio,
    build_rig,
    city_for_region,
    generate_dataset,
    generate_scene,
    noise_seed_for,
    rasterize_features,
    region_for_offset,
    split_geo,
)
from uamap.validation import ContractViolation, GenerationError, SplitError

CFG = GenerationConfig()


def make_manual_scene(elements, offset=(100.0, 100.0)):
    cfg = CFG
    return Scene(
        scene_id="manual",
        region_id=region_for_offset(offset, cfg.tile_size),
        world_offset=np.asarray(offset),
        cameras=build_rig(cfg),
        elements=elements,
    )


class TestGeneration:
    def test_deterministic_in_seed(self):
        a = generate_scene(11, CFG)
        b = generate_scene(11, CFG)
        assert a.to_dict() == b.to_dict()

    def test_straight_template_composition(self):
        cfg = GenerationConfig(template_mix={"straight-2-lane": 1.0})
        scene = generate_scene(0, cfg)
        counts = Counter(e.class_name for e in scene.elements)
        assert counts == {"divider": 2, "boundary": 2}

    def test_intersection_composition(self):
        cfg = GenerationConfig(template_mix={"intersection": 1.0})
        scene = generate_scene(5, cfg)
        counts = Counter(e.class_name for e in scene.elements)
        assert counts == {"divider": 2, "boundary": 4, "ped_crossing": 2}

    def test_elements_inside_perception_range(self):
        for seed in range(40):
            scene = generate_scene(seed, CFG)
            for e in scene.elements:
                p = e.line.points
                assert p[:, 0].min() >= CFG.x_range[0] - 1e-9
                assert p[:, 0].max() <= CFG.x_range[1] + 1e-9
                assert p[:, 1].min() >= CFG.y_range[0] - 1e-9
                assert p[:, 1].max() <= CFG.y_range[1] + 1e-9
                assert len(e.line) == CFG.n_points

    def test_elements_stable_under_resample(self):
        for seed in range(20):
            scene = generate_scene(seed, CFG)
            for e in scene.elements:
                again = resample_polyline(e.line, CFG.n_points)
                np.testing.assert_allclose(again.points, e.line.points,
                                           atol=1e-9)

    def test_region_id_derivable_from_offset(self):
        for seed in range(30):
            scene = generate_scene(seed, CFG)
            assert scene.region_id == region_for_offset(scene.world_offset,
                                                        CFG.tile_size)

    def test_class_histogram_matches_mixture(self):
        # expected class fractions follow from the template composition
        # table and the mixture probabilities
        scenes = generate_dataset(1000, CFG, base_seed=100)
        counts = Counter()
        for s in scenes:
            counts.update(e.class_name for e in s.elements)
        total = sum(counts.values())

        mix = CFG.template_mix
        z = sum(mix.values())
        expect = {c: 0.0 for c in CLASS_NAMES}
        for name, p in mix.items():
            for cls, k in TEMPLATE_ELEMENTS[name].items():
                expect[cls] += (p / z) * k
        per_scene = sum(expect.values())
        for cls in CLASS_NAMES:
            observed = counts[cls] / total
            expected = expect[cls] / per_scene
            assert abs(observed - expected) < 0.05

    def test_unknown_template_rejected(self):
        cfg = GenerationConfig(template_mix={"roundabout": 1.0})
        with pytest.raises(GenerationError):
            generate_scene(0, cfg)

    def test_empty_mix_rejected(self):
        with pytest.raises(GenerationError):
            generate_scene(0, GenerationConfig(template_mix={}))

    def test_scene_requires_elements_and_rig(self):
        line = Polyline2D(np.column_stack([np.zeros(20),
                                           np.linspace(-30, 30, 20)]),
                          FRAME_EGO)
        el = MapElement(0, "divider", line)
        with pytest.raises(ContractViolation):
            Scene("s", "r0_0", np.zeros(2), build_rig(CFG), [])
        with pytest.raises(ContractViolation):
            Scene("s", "r0_0", np.zeros(2), [], [el])

    def test_json_round_trip(self):
        scene = generate_scene(7, CFG)
        back = Scene.from_dict(json.loads(json.dumps(scene.to_dict())))
        assert back.to_dict() == scene.to_dict()

    def test_rig_has_front_and_back(self):
        scene = generate_scene(0, CFG)
        assert [c.name for c in scene.cameras] == ["front", "back"]


class TestRasterization:
    def test_deterministic_in_noise_seed(self):
        scene = generate_scene(3, CFG)
        a = rasterize_features(scene, 55, CFG)
        b = rasterize_features(scene, 55, CFG)
        assert np.array_equal(a.bev, b.bev)
        for k in a.pv:
            assert np.array_equal(a.pv[k], b.pv[k])

    def test_noise_seed_changes_noise_only(self):
        scene = generate_scene(3, CFG)
        a = rasterize_features(scene, 1, CFG)
        b = rasterize_features(scene, 2, CFG)
        assert np.array_equal(a.bev[:, :, :3], b.bev[:, :, :3])
        assert not np.array_equal(a.bev[:, :, 3:], b.bev[:, :, 3:])

    def test_cell_on_divider_reads_zero(self):
        # divider laid exactly through the x-center of grid row 4
        cfg = GenerationConfig(bev_shape=(10, 10, 4))
        h = cfg.bev_shape[0]
        x_cell = cfg.x_range[0] + (4 + 0.5) * (cfg.x_range[1] - cfg.x_range[0]) / h
        line = Polyline2D(np.column_stack([np.full(20, x_cell),
                                           np.linspace(-30, 30, 20)]),
                          FRAME_EGO)
        scene = make_manual_scene([MapElement(0, "divider", line)])
        grids = rasterize_features(scene, 0, cfg)
        np.testing.assert_allclose(grids.bev[4, :, 1], 0.0, atol=1e-12)

    def test_empty_class_reads_clamp(self):
        cfg = GenerationConfig(template_mix={"straight-2-lane": 1.0})
        scene = generate_scene(1, cfg)
        grids = rasterize_features(scene, 0, cfg)
        assert np.all(grids.bev[:, :, CLASS_NAMES.index("ped_crossing")]
                      == cfg.dt_clamp)

    def test_distance_transform_matches_brute_force(self):
        cfg = GenerationConfig(bev_shape=(10, 10, 4))
        scene = generate_scene(9, cfg)
        grids = rasterize_features(scene, 0, cfg)
        h, w = 10, 10
        for k, cls in enumerate(CLASS_NAMES):
            segs = []
            for e in scene.elements:
                if e.class_name != cls:
                    continue
                p = e.line.points
                segs.extend((p[i], p[i + 1]) for i in range(len(p) - 1))
            for i in range(h):
                for j in range(w):
                    cx = cfg.x_range[0] + (i + 0.5) * 30.0 / h
                    cy = cfg.y_range[0] + (j + 0.5) * 60.0 / w
                    best = np.inf
                    for a, b in segs:
                        ab = b - a
                        den = float(ab @ ab)
                        t = 0.0 if den == 0 else float(
                            np.clip((np.array([cx, cy]) - a) @ ab / den, 0, 1))
                        best = min(best, float(np.linalg.norm(
                            np.array([cx, cy]) - (a + t * ab))))
                    expected = min(best, cfg.dt_clamp)
                    assert abs(grids.bev[i, j, k] - expected) < 1e-9

    def test_degradation_zeroes_dt_cells_only(self):
        scene = generate_scene(3, CFG)
        clean = rasterize_features(scene, 5, CFG)
        degraded = rasterize_features(scene, 5, CFG, degrade_fraction=0.3)
        zeroed = np.all(degraded.bev[:, :, :3] == 0.0, axis=2)
        assert 0.2 < zeroed.mean() < 0.4
        # untouched cells identical, PV fully identical
        assert np.array_equal(degraded.bev[~zeroed], clean.bev[~zeroed])
        for k in clean.pv:
            assert np.array_equal(degraded.pv[k], clean.pv[k])

    def test_degrade_fraction_validated(self):
        scene = generate_scene(3, CFG)
        with pytest.raises(ContractViolation):
            rasterize_features(scene, 0, CFG, degrade_fraction=1.5)

    def test_bev_extent_equals_perception_range(self):
        scene = generate_scene(3, CFG)
        grids = rasterize_features(scene, 0, CFG)
        assert grids.x_range == CFG.x_range
        assert grids.y_range == CFG.y_range
        # the grid-sample coords of a cell center are that cell's indices
        h, w = grids.bev.shape[:2]
        cx = CFG.x_range[0] + (4 + 0.5) * 30.0 / h
        cy = CFG.y_range[0] + (9 + 0.5) * 60.0 / w
        coords = grids.ego_to_bev(np.array([[cx, cy]]))
        np.testing.assert_allclose(coords, [[9.0, 4.0]], atol=1e-12)

    def test_pv_grid_coords(self):
        scene = generate_scene(3, CFG)
        grids = rasterize_features(scene, 0, CFG)
        h, w = grids.pv["front"].shape[:2]
        width, height = grids.pv_image_size["front"]
        px = np.array([[(3 + 0.5) * width / w, (2 + 0.5) * height / h]])
        coords = grids.pixel_to_pv("front", px)
        np.testing.assert_allclose(coords, [[3.0, 2.0]], atol=1e-12)

    def test_finite_values(self):
        scene = generate_scene(8, CFG)
        grids = rasterize_features(scene, 0, CFG)
        assert np.all(np.isfinite(grids.bev))
        for g in grids.pv.values():
            assert np.all(np.isfinite(g))


class TestSplits:
    def setup_method(self):
        self.scenes = generate_dataset(120, CFG, base_seed=0)

    def test_region_split_disjoint(self):
        sp = split_geo(self.scenes, "region", 0.7, seed=0)
        assert sp.overlap_ratio == 0.0
        assert set(sp.train).isdisjoint(sp.val)
        assert len(sp.train) + len(sp.val) == len(self.scenes)
        by_id = {s.scene_id: s for s in self.scenes}
        train_regions = {by_id[i].region_id for i in sp.train}
        val_regions = {by_id[i].region_id for i in sp.val}
        assert train_regions.isdisjoint(val_regions)

    def test_city_split_disjoint(self):
        sp = split_geo(self.scenes, "city", 0.7, seed=0)
        assert sp.overlap_ratio == 0.0
        by_id = {s.scene_id: s for s in self.scenes}
        train_cities = {city_for_region(by_id[i].region_id) for i in sp.train}
        val_cities = {city_for_region(by_id[i].region_id) for i in sp.val}
        assert train_cities.isdisjoint(val_cities)

    def test_far_apart_tiles_zero_overlap(self):
        line = Polyline2D(np.column_stack([np.zeros(20),
                                           np.linspace(-30, 30, 20)]),
                          FRAME_EGO)
        el = [MapElement(0, "divider", line)]
        a = Scene("a", region_for_offset((100, 100), 200.0), np.array([100.0, 100.0]),
                  build_rig(CFG), el)
        b = Scene("b", region_for_offset((900, 900), 200.0), np.array([900.0, 900.0]),
                  build_rig(CFG), el)
        sp = split_geo([a, b], "region", 0.5, seed=0)
        assert sp.overlap_ratio == 0.0

    def test_identical_sets_full_overlap(self):
        assert _overlap_ratio(self.scenes[:5], self.scenes[:5]) == 1.0

    def test_overlap_matches_brute_force(self):
        sp = split_geo(self.scenes, "random", 0.7, seed=3)
        by_id = {s.scene_id: s for s in self.scenes}
        train = np.stack([by_id[i].world_offset for i in sp.train])
        count = 0
        for vid in sp.val:
            d = np.linalg.norm(train - by_id[vid].world_offset, axis=1)
            if (d <= 30.0).any():
                count += 1
        assert sp.overlap_ratio == pytest.approx(count / len(sp.val))

    def test_single_region_rejected(self):
        one = [s for s in self.scenes if s.region_id == self.scenes[0].region_id]
        with pytest.raises(SplitError):
            split_geo(one, "region", 0.5, seed=0)

    def test_unknown_strategy_rejected(self):
        with pytest.raises(SplitError):
            split_geo(self.scenes, "by-vibes", 0.5, seed=0)

    def test_bad_ratio_rejected(self):
        with pytest.raises(SplitError):
            split_geo(self.scenes, "random", 1.5, seed=0)

    def test_split_deterministic(self):
        a = split_geo(self.scenes, "region", 0.7, seed=5)
        b = split_geo(self.scenes, "region", 0.7, seed=5)
        assert a.to_dict() == b.to_dict()

    def test_manifest_schema(self):
        sp = split_geo(self.scenes, "region", 0.7, seed=0)
        d = json.loads(json.dumps(sp.to_dict()))
        assert set(d) == {"train", "val", "overlap_ratio", "strategy"}
        assert d["strategy"] == "region"


class TestSegmentDistance:
    def test_point_on_segment(self):
        segs = np.array([[[0.0, 0.0], [2.0, 0.0]]])
        d = _min_dist_to_segments(np.array([[1.0, 0.0], [1.0, 3.0],
                                            [5.0, 0.0]]), segs)
        np.testing.assert_allclose(d, [0.0, 3.0, 3.0])

    def test_zero_length_segment(self):
        segs = np.array([[[1.0, 1.0], [1.0, 1.0]]])
        d = _min_dist_to_segments(np.array([[4.0, 5.0]]), segs)
        np.testing.assert_allclose(d, [5.0])

    def test_empty_segments_infinite(self):
        d = _min_dist_to_segments(np.zeros((3, 2)), np.zeros((0, 2, 2)))
        assert np.all(np.isinf(d))
