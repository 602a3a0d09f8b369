"""Localized depth and mask cleanup applied before lifting and refinement.

Each operation only touches pixels inside its own trigger mask: spike
outliers inside an eroded region, depth-edge pixels, or the boundary band of
a foreground mask.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import ndimage

from .addmask import remove_small_components
from .errors import InvalidArgumentError
from .frames import BitMask, DepthFrame, RgbFrame, boundary_ring, depth_edges

MAD_SCALE = 1.4826
_EIGHT = np.ones((3, 3), dtype=bool)


def _windows(a: np.ndarray, window: int, fill) -> np.ndarray:
    r = window // 2
    padded = np.pad(a, r, mode="constant", constant_values=fill)
    return sliding_window_view(padded, (window, window))


def spike_outliers(depth: DepthFrame, region: BitMask, window: int = 7, mad_k: float = 3.0) -> np.ndarray:
    """Boolean map of MAD outliers among pixels of the eroded safe region."""
    if window < 3 or window % 2 == 0:
        raise InvalidArgumentError("window must be odd and >= 3")
    safe = ndimage.binary_erosion(region.bits, structure=_EIGHT, border_value=0) & depth.valid
    vals = np.where(depth.valid, depth.data.astype(np.float64), np.nan)
    ys, xs = np.nonzero(safe)
    flags = np.zeros_like(safe)
    if len(ys) == 0:
        return flags
    win = _windows(vals, window, np.nan)[ys, xs].reshape(len(ys), -1)
    med = np.nanmedian(win, axis=1)
    mad = np.nanmedian(np.abs(win - med[:, None]), axis=1)
    center = vals[ys, xs]
    flags[ys, xs] = np.abs(center - med) > mad_k * MAD_SCALE * mad
    return flags


def depth_spikefix(
    depth: DepthFrame,
    region: BitMask | None = None,
    window: int = 7,
    mad_k: float = 3.0,
    small_only: bool = False,
    small_max: int = 16,
    max_passes: int = 16,
) -> DepthFrame:
    """Replace isolated depth spikes by the mean of their inlier neighbors.

    Outliers deviate from the local window median by more than
    ``mad_k * 1.4826 * MAD``.  Only pixels of ``erode(region)`` are tested.
    With ``small_only``, outlier components larger than ``small_max`` pixels
    are left alone.  Pixels without any inlier neighbor keep their value.

    A replacement can itself look like an outlier once its neighbors are
    fixed, so detection and replacement repeat until nothing changes (at most
    ``max_passes`` times).  A converged result is a fixed point, so running
    the function on its own output returns it unchanged.  Replacements are
    clipped to the range of the input's valid window, which keeps repeated
    passes inside the local value range.  ``max_passes=1`` is a single pass.
    """
    if max_passes < 1:
        raise InvalidArgumentError("max_passes must be >= 1")
    if region is None:
        region = BitMask(depth.valid)
    d0 = depth.data.astype(np.float64)
    lo = ndimage.minimum_filter(np.where(depth.valid, d0, np.inf), size=window, mode="constant", cval=np.inf)
    hi = ndimage.maximum_filter(np.where(depth.valid, d0, -np.inf), size=window, mode="constant", cval=-np.inf)
    out = d0.copy()
    for _ in range(max_passes):
        cur = DepthFrame(out.astype(np.float32), depth.valid)
        flags = spike_outliers(cur, region, window, mad_k)
        if small_only and flags.any():
            labels, _ = ndimage.label(flags, structure=_EIGHT)
            sizes = np.bincount(labels.ravel())
            small = sizes <= small_max
            small[0] = False
            flags = small[labels]
        ys, xs = np.nonzero(flags)
        if len(ys) == 0:
            break
        good = np.where(depth.valid & ~flags, cur.data.astype(np.float64), np.nan)
        win = _windows(good, window, np.nan)[ys, xs].reshape(len(ys), -1)
        counts = np.sum(np.isfinite(win), axis=1)
        has = counts > 0
        ys, xs = ys[has], xs[has]
        mean = np.nansum(win[has], axis=1) / counts[has]
        new = np.clip(mean, lo[ys, xs], hi[ys, xs]).astype(np.float32)
        if np.array_equal(new, cur.data[ys, xs]):
            break
        out[ys, xs] = new
    return DepthFrame(out.astype(np.float32), depth.valid)


def edge_mapping(
    rgb: RgbFrame, depth: DepthFrame, lap_thresh: float | None = None, radius: int = 3
) -> tuple[RgbFrame, DepthFrame]:
    """Snap depth-edge pixels to the most RGB-similar nearby non-edge pixel.

    Candidates are valid, non-edge pixels within a ``(2r+1)^2`` window; ties
    go to the spatially nearest candidate.  Both RGB and depth are copied.
    """
    if radius < 1:
        raise InvalidArgumentError("radius must be >= 1")
    h, w = depth.height, depth.width
    edges = depth_edges(depth, lap_thresh)
    ys, xs = np.nonzero(edges)
    if len(ys) == 0:
        return RgbFrame(rgb.data.copy()), DepthFrame(depth.data.copy(), depth.valid)
    candidate = depth.valid & ~edges
    col = rgb.data.astype(np.float64)
    target = col[ys, xs]
    best_cost = np.full(len(ys), np.inf)
    best_y = ys.copy()
    best_x = xs.copy()
    offsets = [(dy, dx) for dy in range(-radius, radius + 1) for dx in range(-radius, radius + 1) if dy or dx]
    offsets.sort(key=lambda o: (o[0] ** 2 + o[1] ** 2, o[0], o[1]))
    for dy, dx in offsets:
        qy, qx = ys + dy, xs + dx
        inside = (qy >= 0) & (qy < h) & (qx >= 0) & (qx < w)
        qy_c, qx_c = np.clip(qy, 0, h - 1), np.clip(qx, 0, w - 1)
        ok = inside & candidate[qy_c, qx_c]
        cost = np.sum((col[qy_c, qx_c] - target) ** 2, axis=1)
        better = ok & (cost < best_cost)
        best_cost[better] = cost[better]
        best_y[better] = qy_c[better]
        best_x[better] = qx_c[better]
    found = np.isfinite(best_cost)
    new_rgb = rgb.data.copy()
    new_d = depth.data.copy()
    new_valid = depth.valid.copy()
    fy, fx = ys[found], xs[found]
    new_rgb[fy, fx] = rgb.data[best_y[found], best_x[found]]
    new_d[fy, fx] = depth.data[best_y[found], best_x[found]]
    new_valid[fy, fx] = True
    return RgbFrame(new_rgb), DepthFrame(new_d, new_valid)


def occlusion_cut_mask(mask: BitMask, depth: DepthFrame, ring_thickness: int = 2, lap_thresh=None) -> np.ndarray:
    """Boundary ring on both sides of the contour, intersected with depth edges.

    The edge map is grown by ``ring_thickness - 1`` extra pixels so that it
    reaches as far from the discontinuity as the ring reaches from the
    contour; otherwise diagonal corner pixels of a dilated mask stay out of
    reach.
    """
    ring = boundary_ring(mask, ring_thickness).bits | boundary_ring(~mask, ring_thickness).bits
    edges = depth_edges(depth, lap_thresh)
    if ring_thickness > 1:
        edges = ndimage.binary_dilation(edges, structure=_EIGHT, iterations=ring_thickness - 1)
    return ring & edges & depth.valid


def border_band(height: int, width: int, margin: int) -> np.ndarray:
    band = np.zeros((height, width), bool)
    if margin > 0:
        band[:margin] = band[-margin:] = True
        band[:, :margin] = band[:, -margin:] = True
    return band


def occlusion_mask_refine(
    mask: BitMask,
    depth: DepthFrame,
    ring_thickness: int = 2,
    window: int = 7,
    min_component: int = 16,
    border_margin: int = 4,
    lap_thresh: float | None = None,
) -> BitMask:
    """Relabel foreground/background near the mask contour by disparity.

    Only pixels on both the boundary ring and a depth edge (the cut mask) can
    change; each goes to the side whose mean disparity (1/depth) over the
    window's non-cut pixels is closer to its own.  Small foreground
    components are then cleared, again only inside the cut mask.  Pixels
    within ``border_margin`` of the frame edge keep their original label.
    """
    if (mask.height, mask.width) != (depth.height, depth.width):
        raise InvalidArgumentError("mask and depth dimensions differ")
    bits = mask.bits
    cut = occlusion_cut_mask(mask, depth, ring_thickness, lap_thresh)
    cut &= ~border_band(mask.height, mask.width, border_margin)
    ys, xs = np.nonzero(cut)
    if len(ys) == 0:
        return BitMask(bits)
    disp = np.where(depth.valid, 1.0 / np.where(depth.valid, depth.data, 1.0), np.nan)

    def side_mean(select):
        vals = np.where(select, disp, np.nan)
        win = _windows(vals, window, np.nan)[ys, xs].reshape(len(ys), -1)
        n = np.sum(np.isfinite(win), axis=1)
        return np.where(n > 0, np.nansum(win, axis=1) / np.maximum(n, 1), np.nan)

    stable = depth.valid & ~cut
    m_in = side_mean(stable & bits)
    m_out = side_mean(stable & ~bits)
    # fall back to cut pixels when a side has no stable samples in the window
    m_in = np.where(np.isnan(m_in), side_mean(depth.valid & bits), m_in)
    m_out = np.where(np.isnan(m_out), side_mean(depth.valid & ~bits), m_out)
    d = disp[ys, xs]
    to_fg = np.abs(d - m_in) < np.abs(d - m_out)
    to_bg = np.abs(d - m_out) < np.abs(d - m_in)
    out = bits.copy()
    out[ys[to_fg], xs[to_fg]] = True
    out[ys[to_bg], xs[to_bg]] = False
    cleaned = remove_small_components(BitMask(out), min_component).bits
    out[cut] = cleaned[cut]
    return BitMask(out)
