import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stitch4d.errors import InvalidArgumentError, NoAnchorError
from stitch4d.frames import BitMask, DepthFrame
from stitch4d.refine import (
    AnchorInput,
    RefineConfig,
    RefineReport,
    RefineState,
    curtain_lower_bound,
    diagnostic_objective,
    expand_to_full_res,
    grid_size,
    gt_anchor_fit,
    init_state,
    non_anchor_reg,
    padded_size,
    prop_to_non_anchor,
    refine_depth,
    refine_sequence,
    soft_assignment,
    upsample_fields,
)


def _ramp(h, w):
    # dyadic values stay exact in float32
    yy, xx = np.mgrid[0:h, 0:w]
    return 1.0 + xx / 2 + yy / 4


def _inp(d_ff, gt, valid=None):
    valid = np.ones(np.shape(d_ff), bool) if valid is None else valid
    return AnchorInput(DepthFrame(d_ff), DepthFrame(gt), BitMask(valid))


def _state(S, B, A=None, stride=8, level=0):
    S = np.asarray(S, float)[None]
    B = np.asarray(B, float)[None]
    A = np.zeros(S.shape, bool) if A is None else np.asarray(A, bool)[None]
    z = np.zeros(S.shape, bool)
    return RefineState(S, B, A, z.copy(), z.copy(), level, stride)


class TestConfig:
    def test_strides_must_nest(self):
        with pytest.raises(InvalidArgumentError):
            RefineConfig(strides=(8, 3))

    @pytest.mark.parametrize("key, value", [("eta3", 0.0), ("eta4", 1.5), ("min_unit_ratio", 0.0), ("beta", -1.0)])
    def test_ranges(self, key, value):
        with pytest.raises(InvalidArgumentError):
            RefineConfig(**{key: value})

    def test_padding(self):
        assert padded_size(384, 128) == 385
        assert padded_size(385, 128) == 385
        assert grid_size(385, 8) == 49


class TestFit:
    cfg = RefineConfig(strides=(8,))

    def test_exact_affine_patch(self):
        x = _ramp(17, 17)
        s = gt_anchor_fit(_inp(x, 2 * x + 1), init_state(_inp(x, x), self.cfg), self.cfg)
        assert s.A.all()
        assert np.abs(s.S - 2).max() < 1e-9 and np.abs(s.B - 1).max() < 1e-9

    def test_low_valid_ratio_not_a_candidate(self):
        x = _ramp(17, 17)
        gt = 2 * x + 1
        valid = np.ones((17, 17), bool)
        valid[:5, :5] = False
        valid[0:2, 0:2] = True  # 4 of 25 pixels: ratio 0.16
        gt[0:2, 0:2] = 3 * x[0:2, 0:2] + 5
        s = gt_anchor_fit(_inp(x, gt, valid), init_state(_inp(x, x), self.cfg), self.cfg)
        # the cell is anchored only by fill from its neighbors, not by its own fit
        assert s.S[0, 0, 0] == pytest.approx(2.0, abs=1e-9)
        assert s.B[0, 0, 0] == pytest.approx(1.0, abs=1e-9)

    def test_mad_outlier_restored(self):
        x = _ramp(65, 65)
        gt = 2 * x + 1
        gt[29:36, 29:36] = 200 * x[29:36, 29:36] + 1  # interior of the cell at (4, 4)
        s = gt_anchor_fit(_inp(x, gt), init_state(_inp(x, x), self.cfg), self.cfg)
        assert s.S[0, 4, 4] == pytest.approx(2.0, abs=1e-9)
        assert s.B[0, 4, 4] == pytest.approx(1.0, abs=1e-9)
        assert np.abs(s.S[0] - 2).max() < 1e-9

    def test_flat_patch_keeps_prior_scale(self):
        # constant D_ff in a patch: slope undefined, shift fitted under the prior scale
        x = _ramp(17, 17)
        x[:5, :5] = x[0, 0]
        gt = 2 * x + 1
        s = gt_anchor_fit(_inp(x, gt), init_state(_inp(x, x), self.cfg), self.cfg)
        assert s.S[0, 0, 0] == pytest.approx(2.0, abs=1e-6)
        assert s.B[0, 0, 0] == pytest.approx(1.0, abs=1e-5)


class TestUpsample:
    cfg = RefineConfig(strides=(8, 4, 2))

    def test_init_state_empty(self):
        s = init_state(_inp(np.ones((17, 17)), np.ones((17, 17))), self.cfg, level=1)
        assert s.stride == 4 and not s.A.any() and np.isnan(s.S).all()

    def test_constant(self):
        s = upsample_fields(_state(np.full((3, 3), 1.7), np.full((3, 3), -0.2)), 4, self.cfg, (17, 17))
        assert s.S.shape == (1, 5, 5) and s.level == 1
        assert np.all(s.S == 1.7) and np.all(s.B == -0.2) and not s.A.any()

    def test_linear_ramp_exact(self):
        gy, gx = np.mgrid[0:3, 0:3]
        coarse = _state(0.5 + 0.25 * gx + 0.125 * gy, gx - 2.0 * gy)
        fine = upsample_fields(coarse, 2, self.cfg, (17, 17))
        fy, fx = np.mgrid[0:9, 0:9] / 4
        np.testing.assert_allclose(fine.S[0], 0.5 + 0.25 * fx + 0.125 * fy, atol=1e-15)
        np.testing.assert_allclose(fine.B[0], fx - 2.0 * fy, atol=1e-15)

    def test_grid_mismatch(self):
        with pytest.raises(InvalidArgumentError):
            upsample_fields(_state(np.ones((3, 3)), np.ones((3, 3))), 4, self.cfg, (33, 33))


class TestPropagate:
    def test_single_anchor_fills_plane(self):
        cfg = RefineConfig(strides=(8,), steps3=200)
        S = np.full((5, 5), np.nan)
        B = np.full((5, 5), np.nan)
        S[2, 2], B[2, 2] = 1.3, 0.4
        A = np.isfinite(S)
        out = prop_to_non_anchor(DepthFrame(np.full((33, 33), 3.0)), _state(S, B, A), cfg)
        assert out.A.all()
        assert np.abs(out.S - 1.3).max() < 1e-6 and np.abs(out.B - 0.4).max() < 1e-6

    def test_cliff_blocks(self):
        cfg = RefineConfig(strides=(8,), steps3=200)
        d = np.full((33, 33), 2.0)
        d[:, 17:] = 6.0
        S = np.full((5, 5), np.nan)
        B = np.full((5, 5), np.nan)
        S[2, 0], B[2, 0] = 1.0, 0.0
        S[2, 4], B[2, 4] = 3.0, 1.0
        A = np.isfinite(S)
        out = prop_to_non_anchor(DepthFrame(d), _state(S, B, A), cfg)
        assert np.all(out.S[0][:, :2] == 1.0)
        assert np.all(out.S[0][:, 3:] == 3.0)

    def test_eta_one_copies_neighbor(self):
        cfg = RefineConfig(strides=(8,), steps3=1, eta3=1.0)
        S = np.full((3, 3), np.nan)
        B = np.full((3, 3), np.nan)
        S[1, 1], B[1, 1] = 0.8, 0.25
        out = prop_to_non_anchor(DepthFrame(np.full((17, 17), 2.0)), _state(S, B, np.isfinite(S)), cfg)
        assert out.S[0, 0, 1] == 0.8 and out.B[0, 0, 1] == 0.25


class TestRegularize:
    def test_no_eligible_cells(self):
        cfg = RefineConfig(strides=(8,))
        x = _ramp(17, 17)
        s0 = gt_anchor_fit(_inp(x, x), init_state(_inp(x, x), cfg), cfg)
        out = non_anchor_reg(_inp(x, x), s0, cfg)
        np.testing.assert_array_equal(out.S, s0.S)
        np.testing.assert_array_equal(out.B, s0.B)

    def test_single_eligible_cell_converges(self):
        cfg = RefineConfig(strides=(8,), steps4=300, n_freeze=0)
        x = np.full((33, 33), 2.0)
        S = np.ones((5, 5))
        B = np.zeros((5, 5))
        S[2, 2], B[2, 2] = 5.0, 3.0
        st = _state(S, B, np.ones((5, 5), bool))
        st.fitted[:] = True
        st.fitted[0, 2, 2] = False
        valid = np.ones((33, 33), bool)
        valid[12:21, 12:21] = False  # the cell's patch has no anchor pixels
        out = non_anchor_reg(_inp(x, x, valid), st, cfg)
        assert out.S[0, 2, 2] == pytest.approx(1.0, abs=1e-6)
        assert out.B[0, 2, 2] == pytest.approx(0.0, abs=1e-6)
        np.testing.assert_array_equal(np.delete(out.S.ravel(), 12), np.delete(S.ravel(), 12))

    def test_temporal_variance_drops(self):
        cfg = RefineConfig(strides=(8,), steps4=20, n_freeze=0, eta4=0.5)
        x = np.full((17, 17), 2.0)
        valid = np.zeros((17, 17), bool)
        S = np.stack([np.full((3, 3), 1.0 + 0.3 * (-1) ** t) for t in range(3)])
        B = np.zeros_like(S)
        z = np.zeros(S.shape, bool)
        st = RefineState(S.copy(), B, ~z, z.copy(), z.copy(), 0, 8)
        inputs = [AnchorInput(DepthFrame(x), DepthFrame(x), BitMask(valid))] * 3
        out = non_anchor_reg(inputs, st, cfg)
        before = S.var(axis=0).mean()
        after = out.S.var(axis=0).mean()
        assert after < before
        # flat D_ff: every edge weight is 1, so a direct Jacobi relaxation on
        # the (t, y, x) grid graph must give the same field
        v = S.copy()
        for _ in range(20):
            nxt = v.copy()
            for t, y, x in np.ndindex(v.shape):
                nb = [v[t + dt, y + dy, x + dx] for dt, dy, dx in
                      ((-1, 0, 0), (1, 0, 0), (0, -1, 0), (0, 1, 0), (0, 0, -1), (0, 0, 1))
                      if 0 <= t + dt < 3 and 0 <= y + dy < 3 and 0 <= x + dx < 3]
                nxt[t, y, x] = 0.5 * v[t, y, x] + 0.5 * np.mean(nb)
            v = nxt
        np.testing.assert_allclose(out.S, v, atol=1e-12)


class TestExpand:
    cfg = RefineConfig(strides=(8,))

    def test_beta_zero_uniform(self):
        cfg = RefineConfig(strides=(8,), beta=0.0)
        d = DepthFrame(np.full((17, 17), 2.0))
        st = _state(np.ones((3, 3)), np.zeros((3, 3)))
        _, alpha, _ = soft_assignment(d, st, cfg, 5, 3)
        np.testing.assert_allclose(alpha, 0.25)

    def test_cliff_weight_concentrates(self):
        cfg = RefineConfig(strides=(8,), beta=200.0)
        d = np.full((17, 17), 2.0)
        d[:, 6:] = 6.0
        corners, alpha, ell = soft_assignment(DepthFrame(d), _state(np.ones((3, 3)), np.zeros((3, 3))), cfg, 2, 3)
        same_side = [i for i, (gy, gx) in enumerate(corners) if gx * 8 < 6]
        assert alpha[same_side].sum() > 0.99
        # segment-max oracle: the Laplacian on the cliff columns blocks the far corners
        assert all(ell[i] == 0 for i in same_side) and all(ell[i] > 0 for i in range(4) if i not in same_side)

    def test_weights_normalised(self, rng):
        d = DepthFrame(rng.uniform(1, 3, (17, 17)))
        st = _state(np.ones((3, 3)), np.zeros((3, 3)))
        for u, v in rng.integers(0, 17, (20, 2)):
            _, alpha, _ = soft_assignment(d, st, self.cfg, int(u), int(v))
            assert alpha.min() >= 0 and alpha.sum() == pytest.approx(1.0)

    def test_dense_fields_constant(self):
        st = _state(np.full((3, 3), 1.5), np.full((3, 3), 0.25))
        s, b = expand_to_full_res(DepthFrame(np.full((17, 17), 2.0)), st, self.cfg)
        assert s.shape == (1, 17, 17)
        np.testing.assert_allclose(s, 1.5)
        np.testing.assert_allclose(b, 0.25)


class TestLowerBound:
    def test_identity_when_farther(self, rng):
        r = DepthFrame(rng.uniform(2, 3, (6, 6)))
        c = DepthFrame(rng.uniform(1, 2, (6, 6)))
        out = curtain_lower_bound(r, c, BitMask(np.ones((6, 6))))
        np.testing.assert_array_equal(out.data, r.data)

    def test_single_pixel(self):
        out = curtain_lower_bound(DepthFrame([[0.5]]), DepthFrame([[1.0]]), BitMask([[True]]))
        assert out.data[0, 0] == 1.0

    def test_per_pixel_oracle(self, rng):
        r = rng.uniform(1, 3, (10, 10)).astype(np.float32)
        c = rng.uniform(1, 3, (10, 10)).astype(np.float32)
        m = rng.random((10, 10)) < 0.5
        out = curtain_lower_bound(DepthFrame(r), DepthFrame(c), BitMask(m))
        expect = np.array([[max(r[i, j], c[i, j]) if m[i, j] else r[i, j] for j in range(10)] for i in range(10)])
        np.testing.assert_array_equal(out.data, expect)

    def test_small_component_skipped(self):
        m = np.zeros((5, 5), bool)
        m[2, 2] = True
        out = curtain_lower_bound(DepthFrame(np.ones((5, 5))), DepthFrame(np.full((5, 5), 2.0)), BitMask(m), min_component=2)
        assert out.data[2, 2] == 1.0


class TestObjective:
    def test_perfect_fit_is_zero(self):
        cfg = RefineConfig(strides=(8,))
        x = _ramp(17, 17)
        st = _state(np.full((3, 3), 2.0), np.full((3, 3), 1.0))
        assert diagnostic_objective(_inp(x, 2 * x + 1), st, cfg) == pytest.approx(0.0, abs=1e-9)

    def test_single_pixel_residual(self):
        cfg = RefineConfig(strides=(8,), lambda2=0.0, lambda3=0.0)
        x = np.full((17, 17), 2.0)
        valid = np.zeros((17, 17), bool)
        valid[4, 4] = True
        gt = np.full((17, 17), 2.5)
        st = _state(np.ones((3, 3)), np.zeros((3, 3)))
        assert diagnostic_objective(_inp(x, gt, valid), st, cfg) == pytest.approx(0.5)

    def test_direct_sum_oracle(self, rng):
        cfg = RefineConfig(strides=(8,), beta=0.0, tau_n=0.0, tau_L=1e9, lambda2=0.7, lambda3=0.3)
        x = np.full((17, 17), 2.0)
        gt = rng.uniform(1, 3, (17, 17)).astype(np.float32)
        valid = rng.random((17, 17)) < 0.5
        S, B = rng.uniform(0.5, 1.5, (3, 3)), rng.uniform(-0.2, 0.2, (3, 3))
        st = _state(S, B)
        st.fitted[0, 1, 1] = True
        s_d, b_d = expand_to_full_res(DepthFrame(x), st, cfg)
        out = np.clip(x * s_d[0] + b_d[0], 1e-6, cfg.d_max).astype(np.float64)
        t1 = sum(abs(out[i, j] - gt[i, j]) for i in range(17) for j in range(17) if valid[i, j])
        t2 = t3 = 0.0
        for i in range(3):
            for j in range(3):
                for di, dj in ((0, 1), (1, 0)):
                    a, b = i + di, j + dj
                    if a < 3 and b < 3:
                        diff = abs(S[i, j] - S[a, b]) + abs(B[i, j] - B[a, b])
                        t2 += diff  # flat D_ff: normal similarity 1, no Laplacian edges
                        if not st.fitted[0, i, j] and not st.fitted[0, a, b]:
                            t3 += diff
        expect = t1 + 0.7 * t2 + 0.3 * t3
        got = diagnostic_objective(_inp(x, gt, valid), st, cfg)
        assert got == pytest.approx(expect, abs=1e-5)


class TestRefineDepth:
    def test_no_anchor(self):
        x = np.ones((17, 17))
        with pytest.raises(NoAnchorError):
            refine_depth(_inp(x, x, np.zeros((17, 17), bool)))

    def test_fixed_point(self):
        x = _ramp(40, 56)
        out = refine_depth(_inp(x, x), RefineConfig(strides=(16, 8, 4)))
        assert np.abs(out.data - x).max() < 1e-5

    def test_global_affine_half_valid(self):
        gt = 2.0 + _ramp(97, 129) / 100
        valid = np.zeros(gt.shape, bool)
        valid[:, :64] = True
        out = refine_depth(_inp((gt - 0.5) / 2, gt, valid), RefineConfig(strides=(32, 16, 8)))
        err = np.abs(out.data - gt) / gt
        assert err[valid].max() < 1e-4 and err[~valid].max() < 1e-3

    def test_output_clamped(self):
        x = np.full((17, 17), 2.0)
        out = refine_depth(_inp(x, np.full((17, 17), 50.0)), RefineConfig(strides=(8,), d_max=10.0))
        assert out.data.max() == 10.0

    def test_report(self):
        x = _ramp(33, 33)
        rep = RefineReport()
        refine_depth(_inp(x, 2 * x), RefineConfig(strides=(16, 8)), rep)
        assert [lv["stride"] for lv in rep.levels] == [16, 8]
        assert rep.objective is not None and rep.objective >= 0

    def test_sequence_frames_independent_shapes(self):
        x = _ramp(33, 33)
        outs = refine_sequence([_inp(x, 2 * x), _inp(x, 2 * x + 1)], RefineConfig(strides=(16, 8)))
        assert len(outs) == 2
        assert np.abs(outs[1].data - (2 * x + 1)).max() < 1e-4

    def test_noisy_ff_depth_stays_close(self):
        # flat patches under noise must not collapse the slope to 0
        rng = np.random.default_rng(5)
        gt = np.full((129, 193), 4.0)
        gt[40:90, 60:120] = 2.0
        dff = (gt - 0.2) / 1.3 * (1 + 0.003 * rng.standard_normal(gt.shape))
        valid = np.ones(gt.shape, bool)
        valid[:, 150:] = False
        out = refine_depth(_inp(dff, gt, valid), RefineConfig(strides=(64, 32, 16, 8)))
        err = np.abs(out.data - gt) / gt
        assert np.median(err) < 0.01
        assert (err > 0.05).mean() < 0.01

    @given(st.floats(0.3, 3.0), st.floats(-1.0, 1.0))
    @settings(max_examples=15, deadline=None)
    def test_any_affine_recovered(self, s, b):
        gt = 2.0 + _ramp(33, 49) / 20
        out = refine_depth(_inp((gt - b) / s, gt), RefineConfig(strides=(16, 8)))
        assert np.abs(out.data - gt).max() / gt.min() < 1e-4
