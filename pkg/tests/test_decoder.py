"""Decoder tests: stochastic attention statistics, head oracles, equivariance."""

import json

import numpy as np
import pytest

from uamap.decoder import (
    Decoder,
    DecoderLayer,
    ElementPrediction,
    SpaceSpec,
    UAAttention,
    UAHead,
    layer_to_elements,
)
from uamap.diffcore import Tape, as_diff, grad_check, ops, parameter
from uamap.validation import ContractViolation, NumericalError

BEV = SpaceSpec.bev((-15.0, 15.0), (-30.0, 30.0))


def micro_attention(rng, dim=4, feat=3, k=2):
    return UAAttention(dim, feat, k, BEV, rng)


def micro_inputs(rng, m=1, dim=4, feat=3, h=3, w=3):
    # inputs marked differentiable so gradcheck can treat them as leaves
    q = parameter(rng.normal(0.0, 0.5, (m, dim)))
    refs = parameter(rng.uniform(0.2, 0.8, (m, 2)))
    grid = parameter(rng.normal(0.0, 1.0, (h, w, feat)))
    return q, refs, grid


# -- space mapping ---------------------------------------------------------------


class TestSpaceSpec:
    def test_rejects_unknown_kind(self):
        with pytest.raises(ContractViolation):
            SpaceSpec("image", (0, 0), (1, 1))

    def test_rejects_empty_extent(self):
        with pytest.raises(ContractViolation):
            SpaceSpec.bev((5.0, 5.0), (-30.0, 30.0))

    def test_bev_center_maps_to_grid_center(self):
        pts = as_diff(np.array([[0.5, 0.5]]))
        got = BEV.normalized_to_grid(pts, (25, 50, 8)).values
        assert np.allclose(got, [[50 / 2 - 0.5, 25 / 2 - 0.5]])

    def test_bev_swaps_axes(self):
        # first normalized coordinate runs along grid rows in BEV
        pts = as_diff(np.array([[1.0, 0.0]]))
        got = BEV.normalized_to_grid(pts, (2, 4, 1)).values
        assert np.allclose(got, [[-0.5, 1.5]])

    def test_pv_keeps_axis_order(self):
        pv = SpaceSpec.pv(200, 120)
        pts = as_diff(np.array([[1.0, 0.0]]))
        got = pv.normalized_to_grid(pts, (12, 20, 1)).values
        assert np.allclose(got, [[19.5, -0.5]])

    def test_denormalize_affine(self):
        pts = as_diff(np.array([[0.0, 0.0], [1.0, 1.0], [0.5, 0.5]]))
        got = BEV.denormalize(pts).values
        assert np.allclose(got, [[-15, -30], [15, 30], [0, 0]])

    def test_normalize_roundtrip(self):
        rng = np.random.default_rng(3)
        pts = rng.uniform(-1, 1, (20, 2)) * [15, 30]
        normed = BEV.normalize_np(pts)
        back = BEV.denormalize(as_diff(normed)).values
        assert np.allclose(back, pts, atol=1e-12)


# -- head --------------------------------------------------------------------------


class TestUAHead:
    def test_zero_query_zero_head_centers_everything(self):
        rng = np.random.default_rng(0)
        head = UAHead(8, 5, BEV, rng)
        for p in head.parameters():
            p.values[...] = 0.0
        pred = head(as_diff(np.zeros((2, 8))))
        assert np.allclose(pred.points.values, 0.0, atol=1e-12)
        assert np.allclose(pred.sigmas.values, 1.0, atol=1e-12)
        assert np.allclose(pred.scores.values, 0.5, atol=1e-12)
        assert np.allclose(pred.points_norm.values, 0.5, atol=1e-12)

    def test_outputs_respect_bounds_and_clamps(self):
        rng = np.random.default_rng(1)
        head = UAHead(8, 6, BEV, rng)
        pred = head(as_diff(rng.normal(0, 3, (7, 8))))
        assert pred.scores.shape == (7, 3)
        assert pred.points.shape == (7, 6, 2)
        assert pred.sigmas.shape == (7, 6, 2)
        assert np.all(pred.points.values[..., 0] >= -15)
        assert np.all(pred.points.values[..., 0] <= 15)
        assert np.all(pred.points.values[..., 1] >= -30)
        assert np.all(pred.points.values[..., 1] <= 30)
        assert np.all(pred.sigmas.values >= 1e-3)
        assert np.all(pred.sigmas.values <= 20.0)
        assert np.all(pred.scores.values > 0)
        assert np.all(pred.scores.values < 1)

    def test_nonfinite_query_raises(self):
        rng = np.random.default_rng(2)
        head = UAHead(4, 3, BEV, rng)
        bad = np.zeros((1, 4))
        bad[0, 1] = np.nan
        with pytest.raises(NumericalError):
            head(as_diff(bad))


# -- stochastic attention -----------------------------------------------------------


class TestUAAttention:
    def test_rejects_bad_mode(self):
        rng = np.random.default_rng(0)
        ua = micro_attention(rng)
        q, refs, grid = micro_inputs(rng)
        with pytest.raises(ContractViolation):
            ua(q, refs, grid, "draw", rng)

    def test_sample_mode_needs_rng(self):
        rng = np.random.default_rng(0)
        ua = micro_attention(rng)
        q, refs, grid = micro_inputs(rng)
        with pytest.raises(ContractViolation):
            ua(q, refs, grid, "sample", None)

    def test_rejects_zero_slots(self):
        with pytest.raises(ContractViolation):
            UAAttention(4, 3, 0, BEV, np.random.default_rng(0))

    def test_sigma_respects_clamp(self):
        rng = np.random.default_rng(4)
        ua = micro_attention(rng)
        q, _, _ = micro_inputs(rng, m=5)
        # force extreme raw values through the parameters
        ua.sigma_mlp.layers[-1].bias.values[...] = 60.0
        _, sigma = ua.weight_stats(q)
        assert np.all(sigma.values <= 10.0)
        ua.sigma_mlp.layers[-1].bias.values[...] = -60.0
        _, sigma = ua.weight_stats(q)
        assert np.all(sigma.values >= 1e-4)

    def test_sigma_floor_collapses_sample_onto_mean(self):
        rng = np.random.default_rng(5)
        ua = micro_attention(rng)
        q, refs, grid = micro_inputs(rng)
        ua.sigma_mlp.layers[-1].weight.values[...] = 0.0
        ua.sigma_mlp.layers[-1].bias.values[...] = -50.0
        mean_out = ua(q, refs, grid, "mean", None).values
        sample_out = ua(q, refs, grid, "sample",
                        np.random.default_rng(99)).values
        scale = np.linalg.norm(mean_out)
        assert np.linalg.norm(sample_out - mean_out) <= 1e-3 * scale

    def test_sampling_is_seed_deterministic(self):
        rng = np.random.default_rng(6)
        ua = micro_attention(rng)
        q, refs, grid = micro_inputs(rng)
        a = ua(q, refs, grid, "sample", np.random.default_rng(123)).values
        b = ua(q, refs, grid, "sample", np.random.default_rng(123)).values
        c = ua(q, refs, grid, "sample", np.random.default_rng(124)).values
        assert np.array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_mean_mode_is_pure(self):
        rng = np.random.default_rng(7)
        ua = micro_attention(rng)
        q, refs, grid = micro_inputs(rng)
        a = ua(q, refs, grid, "mean", None).values
        b = ua(q, refs, grid, "mean", None).values
        assert np.array_equal(a, b)

    def test_nonfinite_query_raises(self):
        rng = np.random.default_rng(8)
        ua = micro_attention(rng)
        q, refs, grid = micro_inputs(rng)
        q.values[0, 0] = np.inf
        with pytest.raises(NumericalError):
            ua(q, refs, grid, "mean", None)


MC_SIZES = [100, 1_000, 10_000, 100_000]
MC_BLOCKS = 8


@pytest.fixture(scope="module")
def mc_draws():
    """Sampled outputs for one fixed query; iid draws batched through rows."""
    rng = np.random.default_rng(10)
    ua = UAAttention(16, 3, 8, BEV, rng)
    q, refs, grid = micro_inputs(rng, m=1, dim=16)
    mean_out = ua(q, refs, grid, "mean", None).values.ravel()
    total = MC_BLOCKS * sum(MC_SIZES)
    reps = 1_000
    q_rep = as_diff(np.repeat(q.values, reps, axis=0))
    refs_rep = as_diff(np.repeat(refs.values, reps, axis=0))
    stream = np.random.default_rng(2024)
    chunks = [ua(q_rep, refs_rep, grid, "sample", stream).values
              for _ in range(-(-total // reps))]
    return mean_out, np.concatenate(chunks, axis=0)[:total]


class TestMonteCarloStatistics:
    """Sampled attention must average to the mean-mode output at 1/sqrt(n)."""

    def test_mc_mean_matches_mean_mode(self, mc_draws):
        mean_out, outs = mc_draws
        n = 100_000
        head = outs[:n]
        mc_mean = head.mean(axis=0)
        se = head.std(axis=0, ddof=1) / np.sqrt(n)
        assert np.all(np.abs(mc_mean - mean_out) <= 4.0 * se)

    def test_mc_error_decays_like_inverse_sqrt(self, mc_draws):
        mean_out, outs = mc_draws
        errs = []
        offset = 0
        for n in reversed(MC_SIZES):
            # expected error at n, estimated over disjoint blocks of n draws
            span = MC_BLOCKS * n
            blocks = outs[offset:offset + span].reshape(MC_BLOCKS, n, -1)
            err = np.linalg.norm(blocks.mean(axis=1) - mean_out, axis=1)
            errs.append(err.mean())
            offset += span
        slope = np.polyfit(np.log10(MC_SIZES[::-1]), np.log10(errs), 1)[0]
        assert -0.6 <= slope <= -0.4


class TestReparameterizedGradients:
    def test_gradients_match_finite_differences_with_replayed_noise(self):
        rng = np.random.default_rng(20)
        ua = micro_attention(rng, dim=4, feat=3, k=2)
        q, refs, grid = micro_inputs(rng, m=1, dim=4)
        params = [
            ua.mu_mlp.layers[-1].weight,
            ua.sigma_mlp.layers[-1].weight,
            ua.offset_mlp.layers[-1].weight,
            ua.value_proj.weight,
            ua.output_proj.weight,
            q,
            grid,
        ]

        def f():
            # fresh generator per call replays the identical noise draw
            out = ua(q, refs, grid, "sample", np.random.default_rng(11))
            return ops.sum(ops.multiply(out, out))

        assert grad_check(f, params, eps=1e-6) < 1e-5

    def test_mean_mode_gradcheck(self):
        rng = np.random.default_rng(21)
        ua = micro_attention(rng, dim=4, feat=3, k=2)
        q, refs, grid = micro_inputs(rng, m=2, dim=4)
        params = [ua.mu_mlp.layers[0].weight, ua.value_proj.weight, grid]

        def f():
            out = ua(q, refs, grid, "mean", None)
            return ops.sum(ops.multiply(out, out))

        assert grad_check(f, params, eps=1e-6) < 1e-5


# -- full decoder --------------------------------------------------------------------


def micro_decoder(rng, m=3, dim=8, n_points=4, k=2, layers=2, feat=3):
    return Decoder(m, dim, n_points, k, layers, feat, BEV, rng)


class TestDecoder:
    def test_returns_one_prediction_per_layer(self):
        rng = np.random.default_rng(30)
        dec = micro_decoder(rng, layers=3)
        grid = rng.normal(0, 1, (5, 6, 3))
        outs = dec.forward(grid, mode="mean")
        assert len(outs) == 3
        for pred in outs:
            assert pred.scores.shape == (3, 3)
            assert pred.points.shape == (3, 4, 2)
            assert pred.sigmas.shape == (3, 4, 2)

    def test_layer_outputs_differ(self):
        rng = np.random.default_rng(31)
        dec = micro_decoder(rng, layers=2)
        grid = rng.normal(0, 1, (5, 6, 3))
        outs = dec.forward(grid, mode="mean")
        assert not np.allclose(outs[0].points.values, outs[1].points.values)

    def test_seeded_forward_is_bit_identical(self):
        rng = np.random.default_rng(32)
        dec = micro_decoder(rng)
        grid = rng.normal(0, 1, (5, 6, 3))
        a = dec.forward(grid, mode="sample", rng=np.random.default_rng(5))
        b = dec.forward(grid, mode="sample", rng=np.random.default_rng(5))
        for pa, pb in zip(a, b):
            assert np.array_equal(pa.points.values, pb.points.values)
            assert np.array_equal(pa.scores.values, pb.scores.values)
            assert np.array_equal(pa.sigmas.values, pb.sigmas.values)

    def test_permutation_equivariance_in_mean_mode(self):
        rng = np.random.default_rng(33)
        layer = DecoderLayer(8, 3, 2, 16, BEV, rng)
        head = UAHead(8, 4, BEV, rng)
        q = as_diff(rng.normal(0, 0.5, (6, 8)))
        refs = as_diff(rng.uniform(0.2, 0.8, (6, 2)))
        grid = as_diff(rng.normal(0, 1, (5, 6, 3)))
        base = head(layer(q, refs, grid, "mean", None))
        for trial in range(10):
            perm = np.random.default_rng(100 + trial).permutation(6)
            qp = as_diff(q.values[perm])
            rp = as_diff(refs.values[perm])
            got = head(layer(qp, rp, grid, "mean", None))
            assert np.allclose(got.points.values, base.points.values[perm],
                               atol=1e-10)
            assert np.allclose(got.scores.values, base.scores.values[perm],
                               atol=1e-10)
            assert np.allclose(got.sigmas.values, base.sigmas.values[perm],
                               atol=1e-10)

    def test_all_parameters_receive_gradient_in_sample_mode(self):
        rng = np.random.default_rng(34)
        dec = micro_decoder(rng, layers=1)
        grid = rng.normal(0, 1, (5, 6, 3))
        dec.zero_grad()
        with Tape() as tape:
            outs = dec.forward(grid, mode="sample",
                               rng=np.random.default_rng(9))
            pred = outs[-1]
            loss = ops.add(
                ops.sum(ops.multiply(pred.points, pred.points)),
                ops.add(ops.sum(pred.sigmas), ops.sum(pred.scores)),
            )
        tape.backward(loss)
        for name, p in dec.named_parameters():
            assert np.any(p.grad != 0.0), f"no gradient reached {name}"

    def test_state_dict_roundtrip_restores_outputs(self):
        rng = np.random.default_rng(35)
        dec = micro_decoder(rng)
        grid = rng.normal(0, 1, (5, 6, 3))
        before = dec.forward(grid, mode="mean")[-1].points.values.copy()
        state = dec.state_dict()
        for p in dec.parameters():
            p.values += rng.normal(0, 0.1, p.shape)
        dec.load_state_dict(state)
        after = dec.forward(grid, mode="mean")[-1].points.values
        assert np.array_equal(before, after)

    def test_rejects_empty_configuration(self):
        with pytest.raises(ContractViolation):
            micro_decoder(np.random.default_rng(0), m=0)
        with pytest.raises(ContractViolation):
            micro_decoder(np.random.default_rng(0), layers=0)


class TestElementPrediction:
    def test_layer_to_elements_detaches_and_indexes(self):
        rng = np.random.default_rng(40)
        dec = micro_decoder(rng, m=4)
        grid = rng.normal(0, 1, (5, 6, 3))
        pred = dec.forward(grid, mode="mean")[-1]
        elems = layer_to_elements(pred)
        assert len(elems) == 4
        for i, e in enumerate(elems):
            assert e.query_index == i
            assert isinstance(e.points, np.ndarray)
            assert np.allclose(e.points, pred.points.values[i])
        payload = json.dumps([e.to_dict() for e in elems])
        back = json.loads(payload)
        assert np.allclose(back[0]["points"], elems[0].points)

    def test_prediction_is_frozen(self):
        e = ElementPrediction(np.zeros(3), np.zeros((2, 2)),
                              np.ones((2, 2)), 0)
        with pytest.raises(AttributeError):
            e.query_index = 5
