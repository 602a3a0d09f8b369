import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import ndimage

from stitch4d.errors import InvalidArgumentError
from stitch4d.frames import BitMask, DepthFrame, RgbFrame, depth_edges
from stitch4d.preprocess import (
    border_band,
    depth_spikefix,
    edge_mapping,
    occlusion_cut_mask,
    occlusion_mask_refine,
    spike_outliers,
)


def _spike_oracle(d, valid, region, window, k):
    """Per-pixel loops: flags on the eroded region, then inlier-mean replacement."""
    h, w = d.shape
    r = window // 2
    safe = ndimage.binary_erosion(region, structure=np.ones((3, 3)), border_value=0) & valid
    flags = np.zeros((h, w), bool)
    for y in range(h):
        for x in range(w):
            if not safe[y, x]:
                continue
            win = [d[yy, xx] for yy in range(y - r, y + r + 1) for xx in range(x - r, x + r + 1)
                   if 0 <= yy < h and 0 <= xx < w and valid[yy, xx]]
            med = np.median(win)
            mad = np.median(np.abs(np.array(win) - med))
            flags[y, x] = abs(d[y, x] - med) > k * 1.4826 * mad
    out = d.copy()
    for y, x in zip(*np.nonzero(flags)):
        good = [d[yy, xx] for yy in range(y - r, y + r + 1) for xx in range(x - r, x + r + 1)
                if 0 <= yy < h and 0 <= xx < w and valid[yy, xx] and not flags[yy, xx]]
        if good:
            out[y, x] = np.mean(good)
    return flags, out


def _edge_oracle(rgb, depth, edges, radius):
    h, w = edges.shape
    col = rgb.astype(float)
    out = depth.data.copy()
    for y, x in zip(*np.nonzero(edges)):
        best = None
        for dy in range(-radius, radius + 1):
            for dx in range(-radius, radius + 1):
                yy, xx = y + dy, x + dx
                if (dy or dx) and 0 <= yy < h and 0 <= xx < w and depth.valid[yy, xx] and not edges[yy, xx]:
                    key = (np.sum((col[yy, xx] - col[y, x]) ** 2), dy * dy + dx * dx, dy, dx)
                    if best is None or key < best[0]:
                        best = (key, yy, xx)
        if best:
            out[y, x] = depth.data[best[1], best[2]]
    return out


def _plane(h=24, w=24):
    yy, xx = np.mgrid[0:h, 0:w]
    return 2.0 + 0.01 * xx + 0.02 * yy


class TestSpikefix:
    def test_smooth_plane_identity(self):
        d = DepthFrame(_plane())
        np.testing.assert_array_equal(depth_spikefix(d, window=5).data, d.data)

    def test_isolated_spike(self):
        d = np.ones((15, 15))
        d[7, 7] = 100.0
        out = depth_spikefix(DepthFrame(d), window=5)
        assert out.data[7, 7] == pytest.approx(1.0)
        assert np.all(np.delete(out.data.ravel(), 7 * 15 + 7) == 1.0)

    def test_bad_window(self):
        with pytest.raises(InvalidArgumentError):
            spike_outliers(DepthFrame(np.ones((4, 4))), BitMask(np.ones((4, 4))), window=4)

    def test_oracle(self, rng):
        d = _plane(20, 22) + rng.normal(scale=0.01, size=(20, 22))
        spikes = rng.random(d.shape) < 0.02
        d[spikes] *= rng.uniform(2, 5, spikes.sum())
        d = d.astype(np.float32).astype(np.float64)
        valid = rng.random(d.shape) > 0.05
        depth = DepthFrame(d, valid)
        region = np.ones(d.shape, bool)
        region[:, :3] = False
        flags, expect = _spike_oracle(depth.data.astype(float), depth.valid, region, 5, 3.0)
        np.testing.assert_array_equal(spike_outliers(depth, BitMask(region), 5, 3.0), flags)
        out = depth_spikefix(depth, BitMask(region), window=5, max_passes=1)
        assert np.abs(out.data - expect).max() < 1e-6

    def test_small_only_keeps_large_blob(self):
        d = np.ones((30, 30))
        d[10:16, 10:16] = 5.0
        out = depth_spikefix(DepthFrame(d), window=15, small_only=True, small_max=4)
        assert np.all(out.data[10:16, 10:16] == 5.0)

    @given(st.integers(0, 2**31 - 1))
    @settings(max_examples=25, deadline=None)
    def test_changes_only_flagged(self, seed):
        r = np.random.default_rng(seed)
        d = DepthFrame(r.uniform(1, 3, (12, 12)), r.random((12, 12)) > 0.1)
        region = BitMask(r.random((12, 12)) > 0.2)
        flags = spike_outliers(d, region, 5, 2.0)
        changed = depth_spikefix(d, region, window=5, mad_k=2.0, max_passes=1).data != d.data
        assert not (changed & ~flags).any()


    @given(st.integers(0, 2**31 - 1))
    @settings(max_examples=25, deadline=None)
    def test_repeated_passes(self, seed):
        r = np.random.default_rng(seed)
        d = _plane(16, 16) * np.where(r.random((16, 16)) < 0.05, r.uniform(0.5, 2, (16, 16)), 1.0)
        depth = DepthFrame(d, r.random((16, 16)) > 0.05)
        region = BitMask(r.random((16, 16)) > 0.1)
        out = depth_spikefix(depth, region, window=5)
        changed = out.data != depth.data
        safe = ndimage.binary_erosion(region.bits, structure=np.ones((3, 3)))
        assert not (changed & ~safe).any()
        # every value stays inside the input's valid window range
        lo = ndimage.minimum_filter(np.where(depth.valid, depth.data, np.inf), 5, mode="constant", cval=np.inf)
        hi = ndimage.maximum_filter(np.where(depth.valid, depth.data, -np.inf), 5, mode="constant", cval=-np.inf)
        assert np.all(out.data[changed] >= lo[changed]) and np.all(out.data[changed] <= hi[changed])
        np.testing.assert_array_equal(depth_spikefix(out, region, window=5).data, out.data)

    def test_bad_passes(self):
        with pytest.raises(InvalidArgumentError):
            depth_spikefix(DepthFrame(np.ones((4, 4))), max_passes=0)


class TestEdgeMapping:
    def test_constant_identity(self):
        d = DepthFrame(np.ones((10, 10)))
        rgb = RgbFrame(np.random.default_rng(0).integers(0, 256, (10, 10, 3)))
        r2, d2 = edge_mapping(rgb, d)
        np.testing.assert_array_equal(d2.data, d.data)
        np.testing.assert_array_equal(r2.data, rgb.data)

    def test_step_edge_gets_matching_side(self):
        d = np.ones((12, 12))
        d[:, 6:] = 3.0
        rgb = np.zeros((12, 12, 3), np.uint8)
        rgb[:, :6] = (200, 10, 10)
        rgb[:, 6:] = (10, 10, 200)
        rgb[:, 6] = (199, 10, 10)  # BG-side pixel colored like region A
        r2, d2 = edge_mapping(RgbFrame(rgb), DepthFrame(d), radius=3)
        assert np.all(d2.data[:, 6] == 1.0)
        assert np.all(d2.data[:, 7] == 3.0)

    def test_bad_radius(self):
        with pytest.raises(InvalidArgumentError):
            edge_mapping(RgbFrame(np.zeros((4, 4, 3))), DepthFrame(np.ones((4, 4))), radius=0)

    def test_exhaustive_oracle(self, rng):
        d = np.where(rng.random((16, 16)) < 0.5, 1.0, 2.0)
        d = ndimage.median_filter(d, 3)
        depth = DepthFrame(d)
        rgb = rng.integers(0, 256, (16, 16, 3))
        edges = depth_edges(depth)
        _, d2 = edge_mapping(RgbFrame(rgb), depth, radius=2)
        np.testing.assert_array_equal(d2.data, _edge_oracle(rgb, depth, edges, 2))

    @given(st.integers(0, 2**31 - 1))
    @settings(max_examples=25, deadline=None)
    def test_membership(self, seed):
        r = np.random.default_rng(seed)
        d = DepthFrame(r.choice([1.0, 1.5, 4.0], (14, 14)))
        rgb = RgbFrame(r.integers(0, 256, (14, 14, 3)))
        edges = depth_edges(d)
        _, d2 = edge_mapping(rgb, d, radius=2)
        for y, x in zip(*np.nonzero(edges & (d2.data != d.data))):
            nb = d.data[max(y - 2, 0):y + 3, max(x - 2, 0):x + 3][~edges[max(y - 2, 0):y + 3, max(x - 2, 0):x + 3]]
            assert d2.data[y, x] in nb
        assert not ((d2.data != d.data) & ~edges).any()


class TestMaskRefine:
    @pytest.fixture
    def square(self):
        d = np.full((40, 40), 2.0)
        d[12:28, 12:28] = 1.0
        truth = d == 1.0
        return DepthFrame(d), truth

    def test_no_depth_edge_identity(self):
        m = np.zeros((20, 20), bool)
        m[5:15, 5:15] = True
        out = occlusion_mask_refine(BitMask(m), DepthFrame(np.ones((20, 20))))
        np.testing.assert_array_equal(out.bits, m)

    def test_dilated_mask_recovers_silhouette(self, square):
        depth, truth = square
        dilated = ndimage.binary_dilation(truth, iterations=2, structure=np.ones((3, 3)))
        out = occlusion_mask_refine(BitMask(dilated), depth).bits
        diff = out ^ truth
        # every disagreement lies within 1 px of the true contour
        near = ndimage.binary_dilation(truth, structure=np.ones((3, 3))) & ~ndimage.binary_erosion(truth, structure=np.ones((3, 3)))
        assert not (diff & ~near).any()
        assert (out ^ truth).sum() < (dilated ^ truth).sum()

    def test_border_band(self):
        b = border_band(6, 7, 2)
        assert b.sum() == 6 * 7 - 2 * 3
        assert not border_band(6, 7, 0).any()

    @given(st.integers(0, 2**31 - 1))
    @settings(max_examples=25, deadline=None)
    def test_changes_inside_cut(self, seed):
        r = np.random.default_rng(seed)
        d = DepthFrame(ndimage.median_filter(r.choice([1.0, 2.0, 3.0], (20, 20)), 3))
        m = BitMask(r.random((20, 20)) < 0.5)
        cut = occlusion_cut_mask(m, d) & ~border_band(20, 20, 4)
        changed = occlusion_mask_refine(m, d).bits != m.bits
        assert not (changed & ~cut).any()
