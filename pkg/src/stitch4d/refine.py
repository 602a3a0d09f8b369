"""Pyramidal source-anchored scale/shift refinement of target-view depth.

A feed-forward depth ``D_ff`` is corrected towards an anchor depth ``D_anc``
(rendered from trusted geometry) by a spatially varying affine field
``(s, b)``.  The field lives on a node grid per pyramid level.  Each level
runs four stages: upsampling of the coarser field, closed-form fitting on
anchor-supported patches, gated propagation into unsupported patches, and
regularization of weakly supported patches.  The final grid is expanded to
pixels with a Laplacian-aware soft assignment.

Grid conventions: inputs are padded (edge-replicated ``D_ff``, invalid
anchors) so that ``H-1`` and ``W-1`` are multiples of the coarsest stride.
Node ``(gy, gx)`` at stride ``s`` sits on padded pixel ``(gy*s, gx*s)`` and
owns the patch ``[c - s//2, c + s//2]``.  Node grids of successive levels
are nested, so upsampling keeps existing node values exactly.

Discontinuity tests use ``|Laplacian(D_ff)| / median(D_ff)``, which makes
thresholds and ``beta`` independent of scene scale.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numba
import numpy as np
from scipy import ndimage

from .addmask import remove_small_components
from .errors import InvalidArgumentError, NoAnchorError
from .frames import BitMask, DepthFrame, laplacian5

MAD_SCALE = 1.4826
OUT_MIN = 1e-6

# 8-neighborhood; OFFSETS[7 - k] is the opposite of OFFSETS[k]
OFFSETS = np.array([(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)], dtype=np.int64)
# indices of the 4-neighborhood within OFFSETS
SPATIAL4 = np.array([1, 3, 4, 6], dtype=np.int64)


def _per_level(value, k: int):
    if isinstance(value, (tuple, list)):
        return value[min(k, len(value) - 1)]
    return value


@dataclass(frozen=True)
class RefineConfig:
    """Refinement parameters.

    Per-level parameters accept a scalar (all levels) or a sequence indexed
    by level (the last entry repeats).  ``None`` selects a default derived
    from the grid size.  ``tau_L`` and ``beta`` are in median-normalized
    Laplacian units.
    """

    strides: tuple[int, ...] = (128, 64, 32, 16, 8)
    min_unit_ratio: float = 0.3
    epsilon: float = 1e-8
    cond_tol: float = 1e-8
    min_r2: float = 0.9
    mad_k: float = 3.0
    mad_radius: int = 2
    mad_floor: float = 1e-3
    eta3: float | tuple = 1.0
    eta4: float | tuple = 0.5
    steps3: int | tuple | None = None
    steps4: int | tuple | None = None
    n_flag: int | tuple = 2
    n_freeze: int | tuple = 2
    warmup_steps: int | tuple = 0
    tau_L: float | tuple | None = None
    tau_L_hi: float = 0.5
    tau_L_lo: float = 0.1
    tau_L_floor: float = 0.02
    tau_n: float = 0.5
    tau_inv: float = 0.5
    beta: float = 200.0
    d_max: float = 1e4
    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 1.0

    def __post_init__(self):
        st = tuple(int(s) for s in self.strides)
        if not st or any(s < 1 for s in st):
            raise InvalidArgumentError("strides must be positive")
        for a, b in zip(st, st[1:]):
            if not (b < a and a % b == 0):
                raise InvalidArgumentError("strides must be strictly decreasing, each dividing the previous")
        object.__setattr__(self, "strides", st)
        for name in ("eta3", "eta4"):
            v = getattr(self, name)
            for e in v if isinstance(v, (tuple, list)) else (v,):
                if not 0 < e <= 1:
                    raise InvalidArgumentError(f"{name} must lie in (0, 1]")
        if not 0 < self.min_unit_ratio <= 1:
            raise InvalidArgumentError("min_unit_ratio must lie in (0, 1]")
        if not 0 <= self.tau_n <= 1 or not 0 <= self.tau_inv <= 1:
            raise InvalidArgumentError("tau_n and tau_inv must lie in [0, 1]")
        if self.mad_k <= 0 or self.epsilon < 0 or self.beta < 0 or self.d_max <= OUT_MIN:
            raise InvalidArgumentError("mad_k > 0, epsilon >= 0, beta >= 0 and d_max > 1e-6 required")

    @property
    def n_levels(self) -> int:
        return len(self.strides)


@dataclass(eq=False)
class RefineState:
    """Node-grid fields for one pyramid level over a frame stack ``(F, gh, gw)``.

    ``fitted`` marks cells anchored by the anchor-fit stage (closed-form fit
    or anchor fill); these are never touched by regularization.
    """

    S: np.ndarray
    B: np.ndarray
    A: np.ndarray
    F: np.ndarray
    Phi: np.ndarray
    level: int
    stride: int
    fitted: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.fitted is None:
            self.fitted = np.zeros_like(self.A)

    def copy(self) -> "RefineState":
        return RefineState(
            self.S.copy(), self.B.copy(), self.A.copy(), self.F.copy(), self.Phi.copy(),
            self.level, self.stride, self.fitted.copy(),
        )

    @property
    def grid_shape(self) -> tuple[int, int]:
        return self.S.shape[1], self.S.shape[2]


@dataclass(frozen=True, eq=False)
class AnchorInput:
    d_ff: DepthFrame
    d_anchor: DepthFrame
    valid: BitMask

    def __post_init__(self):
        dims = {(f.height, f.width) for f in (self.d_ff, self.d_anchor, self.valid)}
        if len(dims) != 1:
            raise InvalidArgumentError("d_ff, d_anchor and valid must share dimensions")
        if np.any(self.valid.bits & ~(self.d_ff.valid & self.d_anchor.valid)):
            raise InvalidArgumentError("valid pixels need valid d_ff and d_anchor")


# ---------------------------------------------------------------------------
# Padded input stack
# ---------------------------------------------------------------------------


def padded_size(n: int, coarsest: int) -> int:
    """Smallest ``m >= n`` with ``m - 1`` a multiple of ``coarsest``."""
    return max(1, math.ceil(max(n - 1, 0) / coarsest)) * coarsest + 1


def grid_size(n_padded: int, stride: int) -> int:
    return (n_padded - 1) // stride + 1


@dataclass(eq=False)
class _Stack:
    h: int
    w: int
    x: np.ndarray  # padded D_ff, float64
    xv: np.ndarray  # padded D_ff validity
    y: np.ndarray  # padded anchor depth (0 where unusable)
    m: np.ndarray  # padded anchor validity
    inimg: np.ndarray  # (Hp, Wp) True inside the original frame
    lap: np.ndarray  # normalized |Laplacian(D_ff)|
    gu: np.ndarray  # normalized depth gradient, 0 where invalid
    gv: np.ndarray
    gcount: np.ndarray
    scale: float
    y_scale: float
    lap_max: float

    @property
    def n_frames(self) -> int:
        return self.x.shape[0]

    @property
    def hp(self) -> int:
        return self.x.shape[1]

    @property
    def wp(self) -> int:
        return self.x.shape[2]


def _as_list(obj):
    return list(obj) if isinstance(obj, (list, tuple)) else [obj]


def _build_stack(d_ff_frames, anchor_frames, cfg: RefineConfig) -> _Stack:
    d_ff_frames = _as_list(d_ff_frames)
    if not d_ff_frames:
        raise InvalidArgumentError("at least one frame is required")
    h, w = d_ff_frames[0].height, d_ff_frames[0].width
    if any((f.height, f.width) != (h, w) for f in d_ff_frames):
        raise InvalidArgumentError("all frames must share dimensions")
    hp, wp = padded_size(h, cfg.strides[0]), padded_size(w, cfg.strides[0])
    pad = ((0, 0), (0, hp - h), (0, wp - w))
    xv0 = np.stack([f.valid for f in d_ff_frames])
    x0 = np.stack([f.data.astype(np.float64) for f in d_ff_frames])
    x = np.pad(np.where(xv0, x0, 0.0), pad, mode="edge")
    xv = np.pad(xv0, pad, mode="edge")
    if anchor_frames is None:
        y = np.zeros_like(x)
        m = np.zeros(x.shape, bool)
    else:
        anchor_frames = _as_list(anchor_frames)
        if len(anchor_frames) != len(d_ff_frames):
            raise InvalidArgumentError("frame count mismatch")
        m0 = np.stack([a.valid.bits for a in anchor_frames])
        y0 = np.stack([np.where(a.valid.bits, a.d_anchor.data, 0.0) for a in anchor_frames])
        if any((a.valid.height, a.valid.width) != (h, w) for a in anchor_frames):
            raise InvalidArgumentError("anchor dimensions differ from d_ff")
        m = np.pad(m0, pad) & xv
        y = np.pad(y0.astype(np.float64), pad)
    inimg = np.zeros((hp, wp), bool)
    inimg[:h, :w] = True
    vals = x0[xv0]
    scale = float(np.median(vals)) if vals.size else 1.0
    if not scale > 0:
        scale = 1.0
    yv = y[m]
    y_scale = float(np.median(yv)) if yv.size else scale
    xn = x / scale
    lap = np.abs(laplacian5(xn, xv))
    gv_, gu_ = np.gradient(xn, axis=(1, 2))
    okg = xv.copy()
    okg[:, 1:-1, :] &= xv[:, :-2, :] & xv[:, 2:, :]
    okg[:, :, 1:-1] &= xv[:, :, :-2] & xv[:, :, 2:]
    gu = np.where(okg, gu_, 0.0)
    gv = np.where(okg, gv_, 0.0)
    lap_in = lap[:, :h, :w]
    lap_max = float(lap_in.max()) if lap_in.size else 0.0
    return _Stack(h, w, x, xv, y, m, inimg, lap, gu, gv, okg.astype(np.float64), scale, y_scale, lap_max)


# ---------------------------------------------------------------------------
# Patch statistics
# ---------------------------------------------------------------------------


def _integral(a: np.ndarray) -> np.ndarray:
    out = np.zeros((a.shape[0], a.shape[1] + 1, a.shape[2] + 1))
    np.cumsum(np.cumsum(a, axis=1), axis=2, out=out[:, 1:, 1:])
    return out


def _patch_bounds(n_padded: int, stride: int):
    r = stride // 2
    c = np.arange(grid_size(n_padded, stride)) * stride
    return np.maximum(c - r, 0), np.minimum(c + r, n_padded - 1) + 1


def _patch_sums(a: np.ndarray, stride: int) -> np.ndarray:
    """Sum of ``a`` over every node patch; ``a`` has shape ``(F, Hp, Wp)``."""
    P = _integral(a)
    y0, y1 = _patch_bounds(a.shape[1], stride)
    x0, x1 = _patch_bounds(a.shape[2], stride)
    Y0, X0 = np.ix_(y0, x0)
    Y1, X1 = np.ix_(y1, x1)
    return P[:, Y1, X1] - P[:, Y0, X1] - P[:, Y1, X0] + P[:, Y0, X0]


def _patch_normals(st: _Stack, stride: int) -> np.ndarray:
    cnt = np.maximum(_patch_sums(st.gcount, stride), 1.0)
    mu = _patch_sums(st.gu, stride) / cnt
    mv = _patch_sums(st.gv, stride) / cnt
    n = np.stack([-mu, -mv, np.ones_like(mu)], axis=-1)
    return n / np.linalg.norm(n, axis=-1, keepdims=True)


def _tau_L(st: _Stack, cfg: RefineConfig, k: int) -> float:
    if cfg.tau_L is not None:
        return float(_per_level(cfg.tau_L, k))
    K = cfg.n_levels
    frac = cfg.tau_L_hi if K == 1 else cfg.tau_L_hi + (cfg.tau_L_lo - cfg.tau_L_hi) * k / (K - 1)
    return max(frac * st.lap_max, cfg.tau_L_floor)


def _default_steps(gh: int, gw: int) -> int:
    return 2 * int(math.ceil(math.hypot(gh, gw)))


# ---------------------------------------------------------------------------
# numba kernels
# ---------------------------------------------------------------------------


@numba.njit(cache=True)
def _segment_max(img, y0, x0, y1, x1, skip_first):
    """Max of ``img`` over the Bresenham segment from (y0,x0) to (y1,x1)."""
    if y0 == y1 and x0 == x1:
        return img[y0, x0]
    dx = abs(x1 - x0)
    dy = -abs(y1 - y0)
    sx = 1 if x0 < x1 else -1
    sy = 1 if y0 < y1 else -1
    err = dx + dy
    m = 0.0
    first = True
    while True:
        if not (skip_first and first):
            v = img[y0, x0]
            if v > m:
                m = v
        first = False
        if y0 == y1 and x0 == x1:
            break
        e2 = 2 * err
        if e2 >= dy:
            err += dy
            x0 += sx
        if e2 <= dx:
            err += dx
            y0 += sy
    return m


@numba.njit(cache=True)
def _patch_moments(x, y, m, inimg, labels, stride, gh, gw):
    """Per-node sums over patch pixels sharing the center's edge-free component.

    Pixels of ``m`` count only when their label equals the label of the node
    center; a center lying on an edge (label 0) accepts every valid pixel.
    """
    nf, hp, wp = x.shape
    r = stride // 2
    out = np.zeros((7, nf, gh, gw))
    for f in range(nf):
        for gy in range(gh):
            cy = gy * stride
            for gx in range(gw):
                cx = gx * stride
                lc = labels[f, cy, cx]
                sw = 0.0
                sx = 0.0
                sy = 0.0
                sxx = 0.0
                sxy = 0.0
                syy = 0.0
                nin = 0.0
                for py in range(max(cy - r, 0), min(cy + r, hp - 1) + 1):
                    for px in range(max(cx - r, 0), min(cx + r, wp - 1) + 1):
                        if inimg[py, px]:
                            nin += 1.0
                        if not m[f, py, px]:
                            continue
                        if lc != 0 and labels[f, py, px] != lc:
                            continue
                        xv = x[f, py, px]
                        yv = y[f, py, px]
                        sw += 1.0
                        sx += xv
                        sy += yv
                        sxx += xv * xv
                        sxy += xv * yv
                        syy += yv * yv
                out[0, f, gy, gx] = sw
                out[1, f, gy, gx] = sx
                out[2, f, gy, gx] = sy
                out[3, f, gy, gx] = sxx
                out[4, f, gy, gx] = sxy
                out[5, f, gy, gx] = syy
                out[6, f, gy, gx] = nin
    return out


@numba.njit(cache=True)
def _edge_laplacian(lap, gh, gw, stride, offsets):
    """Segment-max normalized Laplacian for every directed 8-neighbor edge."""
    nf = lap.shape[0]
    out = np.full((nf, gh, gw, 8), np.inf)
    for f in range(nf):
        for gy in range(gh):
            for gx in range(gw):
                for k in range(4, 8):
                    ny = gy + offsets[k, 0]
                    nx = gx + offsets[k, 1]
                    if ny < 0 or ny >= gh or nx < 0 or nx >= gw:
                        continue
                    v = _segment_max(lap[f], gy * stride, gx * stride, ny * stride, nx * stride, False)
                    out[f, gy, gx, k] = v
                    out[f, ny, nx, 7 - k] = v
    return out


@numba.njit(cache=True)
def _propagate_kernel(S, B, A, allowed, w_loose, w_strict, warmup, steps, n_flag, eta, offsets):
    nf, gh, gw = S.shape
    Phi = np.zeros(A.shape, dtype=np.bool_)
    newS = S.copy()
    newB = B.copy()
    U = np.zeros(A.shape, dtype=np.bool_)
    iters = 0
    for it in range(steps):
        W = w_loose if it < warmup else w_strict
        n_upd = 0
        for f in range(nf):
            for y in range(gh):
                for x in range(gw):
                    U[f, y, x] = False
                    if A[f, y, x] or not allowed[f, y, x]:
                        continue
                    sw = 0.0
                    ss = 0.0
                    sb = 0.0
                    for k in range(8):
                        ny = y + offsets[k, 0]
                        nx = x + offsets[k, 1]
                        if ny < 0 or ny >= gh or nx < 0 or nx >= gw or not A[f, ny, nx]:
                            continue
                        wk = W[f, y, x, k]
                        if wk > 0.0:
                            sw += wk
                            ss += wk * S[f, ny, nx]
                            sb += wk * B[f, ny, nx]
                    if sw > 0.0:
                        U[f, y, x] = True
                        n_upd += 1
                        ms = ss / sw
                        mb = sb / sw
                        if np.isnan(S[f, y, x]) or np.isnan(B[f, y, x]):
                            newS[f, y, x] = ms
                            newB[f, y, x] = mb
                        else:
                            newS[f, y, x] = (1.0 - eta) * S[f, y, x] + eta * ms
                            newB[f, y, x] = (1.0 - eta) * B[f, y, x] + eta * mb
        if n_upd == 0:
            break
        iters += 1
        for f in range(nf):
            for y in range(gh):
                for x in range(gw):
                    if U[f, y, x]:
                        S[f, y, x] = newS[f, y, x]
                        B[f, y, x] = newB[f, y, x]
                        A[f, y, x] = True
                        if it < n_flag:
                            Phi[f, y, x] = True
    return Phi, iters


@numba.njit(cache=True)
def _regularize_kernel(S, B, R, Phi, ws_loose, ws_strict, wt_loose, wt_strict, warmup, steps, n_freeze, eta, offsets4):
    nf, gh, gw = S.shape
    newS = S.copy()
    newB = B.copy()
    n_active = 0
    for it in range(steps):
        strict = it >= warmup
        ws = ws_strict if strict else ws_loose
        wt = wt_strict if strict else wt_loose
        changed = False
        for f in range(nf):
            for y in range(gh):
                for x in range(gw):
                    newS[f, y, x] = S[f, y, x]
                    newB[f, y, x] = B[f, y, x]
                    if not R[f, y, x] or (it < n_freeze and Phi[f, y, x]):
                        continue
                    sw = 0.0
                    ss = 0.0
                    sb = 0.0
                    for k in range(4):
                        ny = y + offsets4[k, 0]
                        nx = x + offsets4[k, 1]
                        if ny < 0 or ny >= gh or nx < 0 or nx >= gw:
                            continue
                        wk = ws[f, y, x, k]
                        if wk > 0.0 and not np.isnan(S[f, ny, nx]) and not np.isnan(B[f, ny, nx]):
                            sw += wk
                            ss += wk * S[f, ny, nx]
                            sb += wk * B[f, ny, nx]
                    for k in range(2):
                        nt = f - 1 if k == 0 else f + 1
                        if nt < 0 or nt >= nf:
                            continue
                        wk = wt[f, y, x, k]
                        if wk > 0.0 and not np.isnan(S[nt, y, x]) and not np.isnan(B[nt, y, x]):
                            sw += wk
                            ss += wk * S[nt, y, x]
                            sb += wk * B[nt, y, x]
                    if sw <= 0.0:
                        continue
                    changed = True
                    ms = ss / sw
                    mb = sb / sw
                    if np.isnan(S[f, y, x]) or np.isnan(B[f, y, x]):
                        newS[f, y, x] = ms
                        newB[f, y, x] = mb
                    else:
                        newS[f, y, x] = (1.0 - eta) * S[f, y, x] + eta * ms
                        newB[f, y, x] = (1.0 - eta) * B[f, y, x] + eta * mb
        if changed:
            n_active += 1
            for f in range(nf):
                for y in range(gh):
                    for x in range(gw):
                        S[f, y, x] = newS[f, y, x]
                        B[f, y, x] = newB[f, y, x]
    return n_active


@numba.njit(cache=True)
def _expand_kernel(lap, xv, S, B, stride, h, w, beta):
    nf, gh, gw = S.shape
    s_out = np.full((nf, h, w), np.nan)
    b_out = np.full((nf, h, w), np.nan)
    ell = np.zeros(4)
    cs = np.zeros(4)
    cb = np.zeros(4)
    for f in range(nf):
        for py in range(h):
            gy0 = py // stride
            if gy0 > gh - 2:
                gy0 = max(gh - 2, 0)
            gy1 = min(gy0 + 1, gh - 1)
            for px in range(w):
                if not xv[f, py, px]:
                    continue
                gx0 = px // stride
                if gx0 > gw - 2:
                    gx0 = max(gw - 2, 0)
                gx1 = min(gx0 + 1, gw - 1)
                lmin = np.inf
                for c in range(4):
                    gy = gy0 if c < 2 else gy1
                    gx = gx0 if (c & 1) == 0 else gx1
                    ell[c] = _segment_max(lap[f], py, px, gy * stride, gx * stride, True)
                    cs[c] = S[f, gy, gx]
                    cb[c] = B[f, gy, gx]
                    if ell[c] < lmin:
                        lmin = ell[c]
                tw = 0.0
                ts = 0.0
                tb = 0.0
                for c in range(4):
                    a = math.exp(-beta * (ell[c] - lmin))
                    tw += a
                    ts += a * cs[c]
                    tb += a * cb[c]
                s_out[f, py, px] = ts / tw
                b_out[f, py, px] = tb / tw
    return s_out, b_out


@numba.njit(cache=True)
def _expand_weights(lap, py, px, corners_y, corners_x, beta):
    n = corners_y.shape[0]
    ell = np.empty(n)
    for c in range(n):
        ell[c] = _segment_max(lap, py, px, corners_y[c], corners_x[c], True)
    lmin = ell.min()
    a = np.exp(-beta * (ell - lmin))
    return a / a.sum(), ell


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------


def _empty_state(st: _Stack, k: int, stride: int) -> RefineState:
    gh, gw = grid_size(st.hp, stride), grid_size(st.wp, stride)
    shape = (st.n_frames, gh, gw)
    z = np.zeros(shape, bool)
    return RefineState(np.full(shape, np.nan), np.full(shape, np.nan), z, z.copy(), z.copy(), k, stride)


def _upsample(state: RefineState, new_stride: int, k: int, hp: int, wp: int) -> RefineState:
    gh, gw = grid_size(hp, new_stride), grid_size(wp, new_stride)
    fac = state.stride // new_stride
    if state.stride % new_stride or fac < 1:
        raise InvalidArgumentError("new stride must divide the current stride")
    jy = np.arange(gh)
    jx = np.arange(gw)
    y0 = np.minimum(jy // fac, state.S.shape[1] - 1)
    x0 = np.minimum(jx // fac, state.S.shape[2] - 1)
    y1 = np.minimum(y0 + 1, state.S.shape[1] - 1)
    x1 = np.minimum(x0 + 1, state.S.shape[2] - 1)
    ty = ((jy % fac) / fac)[None, :, None]
    tx = ((jx % fac) / fac)[None, None, :]

    def interp(G):
        g00 = G[:, y0][:, :, x0]
        g01 = G[:, y0][:, :, x1]
        g10 = G[:, y1][:, :, x0]
        g11 = G[:, y1][:, :, x1]
        top = g00 + tx * (g01 - g00) if fac > 1 else g00
        bot = g10 + tx * (g11 - g10) if fac > 1 else g10
        out = top + ty * (bot - top) if fac > 1 else top
        # keep node values bit-exact where the grids coincide
        same_y = (jy % fac == 0)[None, :, None]
        same_x = (jx % fac == 0)[None, None, :]
        return np.where(same_y & same_x, g00, out)

    z = np.zeros((state.S.shape[0], gh, gw), bool)
    return RefineState(interp(state.S), interp(state.B), z, z.copy(), z.copy(), k, new_stride)


def _local_mad_inliers(values: np.ndarray, cand: np.ndarray, radius: int, k: float, floor: np.ndarray) -> np.ndarray:
    win = 2 * radius + 1
    v = np.where(cand, values, np.nan)
    pad = np.pad(v, ((0, 0), (radius, radius), (radius, radius)), constant_values=np.nan)
    view = np.lib.stride_tricks.sliding_window_view(pad, (win, win), axis=(1, 2))
    idx = np.nonzero(cand)
    if len(idx[0]) == 0:
        return np.zeros_like(cand)
    samples = view[idx].reshape(len(idx[0]), -1)
    med = np.nanmedian(samples, axis=1)
    mad = np.nanmedian(np.abs(samples - med[:, None]), axis=1)
    mad = np.maximum(mad, floor[idx] if np.ndim(floor) else floor)
    ok = np.zeros_like(cand)
    ok[idx] = np.abs(values[idx] - med) <= k * MAD_SCALE * mad
    return ok


def _anchor_fill(S, B, A, supported, gate):
    """Grow anchors into supported cells from the mean of anchored 3x3 neighbors.

    Only neighbors connected by a gate-passing edge contribute, so fills do
    not mix values across depth discontinuities.
    """
    S = S.copy()
    B = B.copy()
    A = A.copy()
    F = supported & ~A
    w = np.ascontiguousarray(gate.astype(np.float64))
    _propagate_kernel(S, B, A, F, w, w, 0, F.size + 1, 0, 1.0, OFFSETS)
    return S, B, A, F & ~A


def _edge_free_labels(st: _Stack, tau: float) -> np.ndarray:
    """4-connected components of pixels whose normalized Laplacian is below ``tau``."""
    labels = np.zeros(st.x.shape, np.int64)
    for f in range(st.n_frames):
        labels[f] = ndimage.label(st.lap[f] < tau)[0]
    return labels


def _slope(Sw, Sx, Sy, Sxx, Sxy, Syy, cfg: RefineConfig, scale: float):
    """Closed-form slope plus a mask of fits that are well conditioned.

    A fit counts as well conditioned when the D_ff spread is nonzero and the
    squared correlation reaches ``min_r2``.  Under noise in D_ff the squared
    correlation equals the factor by which the slope is attenuated, so this
    rejects flat patches whose slope would be biased toward zero.
    """
    denom = Sw * Sxx - Sx * Sx
    cov = Sw * Sxy - Sx * Sy
    var_y = Sw * Syy - Sy * Sy
    with np.errstate(divide="ignore", invalid="ignore"):
        s_fit = cov / (denom + cfg.epsilon)
        r2 = np.where((denom > 0) & (var_y > 0), cov * cov / (denom * var_y), 0.0)
    well = (denom > cfg.cond_tol * (Sw * scale) ** 2) & (r2 >= cfg.min_r2)
    return s_fit, well


def _global_prior(st: _Stack, cfg: RefineConfig) -> np.ndarray:
    """Per-frame scale from one fit over every anchor pixel; 1 when ill conditioned."""
    out = np.ones(st.n_frames)
    for f in range(st.n_frames):
        m = st.m[f]
        if not m.any():
            continue
        x = st.x[f][m] - st.scale
        y = st.y[f][m] - st.y_scale
        n = float(m.sum())
        s_fit, well = _slope(n, x.sum(), y.sum(), x @ x, x @ y, y @ y, cfg, st.scale)
        if well and np.isfinite(s_fit) and s_fit > 0:
            out[f] = s_fit
    return out


def _fit(st: _Stack, state: RefineState, cfg: RefineConfig, weights=None) -> RefineState:
    s = state.stride
    if weights is None:
        weights = _edge_weights(st, cfg, state.level, s)
    cx, cy = st.scale, st.y_scale
    xc = np.where(st.m, st.x - cx, 0.0)
    yc = np.where(st.m, st.y - cy, 0.0)
    labels = _edge_free_labels(st, _tau_L(st, cfg, state.level))
    gh, gw = state.grid_shape
    Sw, Sx, Sy, Sxx, Sxy, Syy, n_in = _patch_moments(xc, yc, st.m, st.inimg, labels, s, gh, gw)
    ratio = Sw / np.maximum(n_in, 1.0)
    eps = cfg.epsilon
    s_fit, well = _slope(Sw, Sx, Sy, Sxx, Sxy, Syy, cfg, st.scale)
    # ill-conditioned patches keep the coarser scale and fit only the shift
    coarse = np.broadcast_to(_global_prior(st, cfg)[:, None, None], s_fit.shape)
    prior = np.where(np.isfinite(state.S), state.S, coarse)
    with np.errstate(divide="ignore", invalid="ignore"):
        s_fit = np.where(well, s_fit, prior)
        b_c = (Sy - s_fit * Sx) / (Sw + eps)
    b_fit = b_c - s_fit * cx + cy
    cand = (ratio >= cfg.min_unit_ratio) & np.isfinite(s_fit) & np.isfinite(b_fit) & (s_fit > 0) & (Sw > 0)
    s_floor = cfg.mad_floor * np.maximum(np.abs(s_fit), 1e-12)
    b_floor = cfg.mad_floor * abs(st.y_scale)
    ok_s = _local_mad_inliers(s_fit, cand, cfg.mad_radius, cfg.mad_k, np.where(cand, s_floor, 0.0))
    ok_b = _local_mad_inliers(b_fit, cand, cfg.mad_radius, cfg.mad_k, b_floor)
    A = cand & ok_s & ok_b
    S = np.where(A, s_fit, state.S)
    B = np.where(A, b_fit, state.B)
    S, B, A, F = _anchor_fill(S, B, A, Sw > 0, weights[1] > 0)
    return RefineState(S, B, A, F, np.zeros_like(A), state.level, s, fitted=A.copy())


def _edge_weights(st: _Stack, cfg: RefineConfig, k: int, stride: int):
    gh, gw = grid_size(st.hp, stride), grid_size(st.wp, stride)
    n = _patch_normals(st, stride)
    sim = np.zeros((st.n_frames, gh, gw, 8))
    for d, (oy, ox) in enumerate(OFFSETS):
        shifted = np.full_like(n, np.nan)
        ys = slice(max(oy, 0), gh + min(oy, 0))
        yd = slice(max(-oy, 0), gh + min(-oy, 0))
        xs = slice(max(ox, 0), gw + min(ox, 0))
        xd = slice(max(-ox, 0), gw + min(-ox, 0))
        shifted[:, yd, xd] = n[:, ys, xs]
        sim[..., d] = np.nan_to_num((np.sum(n * shifted, axis=-1) + 1.0) / 2.0, nan=0.0)
    lap_edge = _edge_laplacian(st.lap, gh, gw, stride, OFFSETS)
    g_nrm = sim >= cfg.tau_n
    g_lap = lap_edge < _tau_L(st, cfg, k)
    loose = sim
    strict = np.where(g_lap & g_nrm, sim, 0.0)
    tsim = np.zeros((st.n_frames, gh, gw, 2))
    if st.n_frames > 1:
        dots = (np.sum(n[1:] * n[:-1], axis=-1) + 1.0) / 2.0
        tsim[1:, :, :, 0] = dots
        tsim[:-1, :, :, 1] = dots
    return loose, strict, tsim, g_nrm


def _propagate(st: _Stack, state: RefineState, cfg: RefineConfig, weights=None) -> tuple[RefineState, int]:
    k = state.level
    if weights is None:
        weights = _edge_weights(st, cfg, k, state.stride)
    loose, strict = weights[0], weights[1]
    gh, gw = state.grid_shape
    steps = _per_level(cfg.steps3, k)
    steps = _default_steps(gh, gw) if steps is None else int(steps)
    out = state.copy()
    Phi, iters = _propagate_kernel(
        out.S, out.B, out.A, np.ones(out.A.shape, bool), np.ascontiguousarray(loose), np.ascontiguousarray(strict),
        int(_per_level(cfg.warmup_steps, k)), steps, int(_per_level(cfg.n_flag, k)),
        float(_per_level(cfg.eta3, k)), OFFSETS,
    )
    out.Phi = Phi
    return out, iters


def _regularize(st: _Stack, state: RefineState, cfg: RefineConfig, weights=None) -> tuple[RefineState, int]:
    k = state.level
    s = state.stride
    if weights is None:
        weights = _edge_weights(st, cfg, k, s)
    loose, strict, tsim, _ = weights
    gh, gw = state.grid_shape
    w = st.m.astype(np.float64)
    n_in = _patch_sums(np.broadcast_to(st.inimg.astype(np.float64), st.x.shape), s)
    invalid_ratio = 1.0 - _patch_sums(w, s) / np.maximum(n_in, 1.0)
    center_ok = st.xv[:, ::s, ::s][:, :gh, :gw]
    R = (invalid_ratio >= cfg.tau_inv) & center_ok & ~state.fitted
    ws_loose = loose[..., SPATIAL4]
    tw_loose = tsim
    gate_t = tsim >= cfg.tau_n
    if k < 2:
        # coarse levels: sharpened normal weights, no Laplacian gate
        sim4 = loose[..., SPATIAL4]
        ws_strict = np.where(sim4 >= cfg.tau_n, sim4**2, 0.0)
        tw_strict = np.where(gate_t, tsim**2, 0.0)
    else:
        ws_strict = strict[..., SPATIAL4]
        tw_strict = np.where(gate_t, tsim, 0.0)
    steps = _per_level(cfg.steps4, k)
    steps = _default_steps(gh, gw) if steps is None else int(steps)
    out = state.copy()
    n = _regularize_kernel(
        out.S, out.B, R, state.Phi,
        np.ascontiguousarray(ws_loose), np.ascontiguousarray(ws_strict),
        np.ascontiguousarray(tw_loose), np.ascontiguousarray(tw_strict),
        int(_per_level(cfg.warmup_steps, k)), steps, int(_per_level(cfg.n_freeze, k)),
        float(_per_level(cfg.eta4, k)), OFFSETS[SPATIAL4],
    )
    return out, n


def _fill_missing(state: RefineState) -> int:
    """Nearest-cell fill of cells no stage reached; returns the count filled."""
    bad = ~(np.isfinite(state.S) & np.isfinite(state.B))
    n = int(bad.sum())
    if n == 0:
        return 0
    for f in range(state.S.shape[0]):
        b = bad[f]
        if not b.any():
            continue
        if b.all():
            state.S[f] = 1.0
            state.B[f] = 0.0
            continue
        _, (iy, ix) = ndimage.distance_transform_edt(b, return_indices=True)
        state.S[f] = state.S[f][iy, ix]
        state.B[f] = state.B[f][iy, ix]
    return n


def _expand(st: _Stack, state: RefineState, cfg: RefineConfig):
    return _expand_kernel(
        st.lap, st.xv, np.ascontiguousarray(state.S), np.ascontiguousarray(state.B),
        state.stride, st.h, st.w, float(cfg.beta),
    )


def _apply(st: _Stack, s_dense, b_dense, cfg: RefineConfig) -> np.ndarray:
    x = st.x[:, : st.h, : st.w]
    xv = st.xv[:, : st.h, : st.w]
    out = np.clip(x + (s_dense - 1.0) * x + b_dense, OUT_MIN, cfg.d_max)
    return np.where(xv & np.isfinite(out), out, 0.0), xv & np.isfinite(out)


# ---------------------------------------------------------------------------
# Public API
# ---------------------------------------------------------------------------


def _split_inputs(inputs):
    items = _as_list(inputs)
    return [a.d_ff for a in items], items


def init_state(inputs, cfg: RefineConfig, level: int = 0) -> RefineState:
    """Uninitialized level-``level`` state matching the padded input grid."""
    st = _build_stack(*_split_inputs(inputs), cfg)
    return _empty_state(st, level, cfg.strides[level])


def upsample_fields(state: RefineState, new_stride: int, cfg: RefineConfig, frame_shape: tuple[int, int]) -> RefineState:
    """Bilinear upsampling of ``(S, B)`` onto the nested finer node grid.

    ``frame_shape`` is the unpadded ``(height, width)``.  Anchor, fill and
    flag masks are reset for the new level.
    """
    hp = padded_size(frame_shape[0], cfg.strides[0])
    wp = padded_size(frame_shape[1], cfg.strides[0])
    if (grid_size(hp, state.stride), grid_size(wp, state.stride)) != state.grid_shape:
        raise InvalidArgumentError("state grid does not match frame shape")
    level = cfg.strides.index(new_stride) if new_stride in cfg.strides else state.level + 1
    return _upsample(state, new_stride, level, hp, wp)


def gt_anchor_fit(inputs, state: RefineState, cfg: RefineConfig) -> RefineState:
    """Closed-form per-patch fit of ``D_anc ~ s * D_ff + b`` plus anchor fill."""
    st = _build_stack(*_split_inputs(inputs), cfg)
    return _fit(st, state, cfg)


def prop_to_non_anchor(d_ff, state: RefineState, cfg: RefineConfig) -> RefineState:
    """Gated relaxation from anchored cells into their unanchored neighbors."""
    st = _build_stack(d_ff, None, cfg)
    return _propagate(st, state, cfg)[0]


def non_anchor_reg(inputs, state: RefineState, cfg: RefineConfig) -> RefineState:
    """Spatio-temporal relaxation of weakly supported, non-fitted cells."""
    st = _build_stack(*_split_inputs(inputs), cfg)
    return _regularize(st, state, cfg)[0]


def expand_to_full_res(d_ff, state: RefineState, cfg: RefineConfig) -> tuple[np.ndarray, np.ndarray]:
    """Dense ``(s, b)`` fields of shape ``(F, H, W)``; NaN where ``D_ff`` is invalid."""
    st = _build_stack(d_ff, None, cfg)
    return _expand(st, state, cfg)


def soft_assignment(d_ff: DepthFrame, state: RefineState, cfg: RefineConfig, u: int, v: int, frame: int = 0):
    """Blend weights and barriers of the 4 corner nodes at pixel ``(u, v)``.

    Returns ``(corners, alpha, ell)`` where ``corners`` lists ``(gy, gx)``.
    """
    st = _build_stack(d_ff, None, cfg)
    s = state.stride
    gh, gw = state.grid_shape
    gy0 = min(v // s, max(gh - 2, 0))
    gx0 = min(u // s, max(gw - 2, 0))
    corners = [(gy0, gx0), (gy0, min(gx0 + 1, gw - 1)), (min(gy0 + 1, gh - 1), gx0), (min(gy0 + 1, gh - 1), min(gx0 + 1, gw - 1))]
    cy = np.array([c[0] * s for c in corners], dtype=np.int64)
    cx = np.array([c[1] * s for c in corners], dtype=np.int64)
    alpha, ell = _expand_weights(st.lap[frame], v, u, cy, cx, float(cfg.beta))
    return corners, alpha, ell


def curtain_lower_bound(
    d_refined: DepthFrame,
    d_curtain: DepthFrame,
    apply_mask: BitMask,
    min_component: int = 0,
    smooth_sigma: float | None = None,
) -> DepthFrame:
    """Raise refined depth to the curtain depth inside the cleaned mask.

    The curtain depth is a lower bound for content revealed behind a
    foreground silhouette.  With ``smooth_sigma`` the curtain depth is first
    Gaussian-smoothed over its own valid pixels.
    """
    dims = {(f.height, f.width) for f in (d_refined, d_curtain, apply_mask)}
    if len(dims) != 1:
        raise InvalidArgumentError("dimension mismatch")
    cur = d_curtain.data.astype(np.float64)
    cv = d_curtain.valid
    if smooth_sigma:
        num = ndimage.gaussian_filter(np.where(cv, cur, 0.0), smooth_sigma)
        den = ndimage.gaussian_filter(cv.astype(np.float64), smooth_sigma)
        cur = np.where(cv, num / np.maximum(den, 1e-12), 0.0)
    mask = remove_small_components(apply_mask, min_component).bits & cv
    ref = d_refined.data.astype(np.float64)
    rv = d_refined.valid
    lifted = np.where(rv, np.maximum(ref, cur), cur)
    out = np.where(mask, lifted, ref)
    return DepthFrame(out.astype(np.float32), rv | mask)


@dataclass
class RefineReport:
    levels: list[dict] = field(default_factory=list)
    objective: float | None = None
    filled_fallback: int = 0


def run_levels(inputs, cfg: RefineConfig, report: RefineReport | None = None) -> tuple[_Stack, RefineState]:
    d_ff, items = _split_inputs(inputs)
    st = _build_stack(d_ff, items, cfg)
    if not st.m.any():
        raise NoAnchorError("anchor validity mask is empty")
    state = None
    for k, s in enumerate(cfg.strides):
        state = _empty_state(st, k, s) if state is None else _upsample(state, s, k, st.hp, st.wp)
        weights = _edge_weights(st, cfg, k, s)
        state = _fit(st, state, cfg, weights)
        n_fit = int(state.A.sum())
        state, it3 = _propagate(st, state, cfg, weights)
        state, it4 = _regularize(st, state, cfg, weights)
        filled = _fill_missing(state)
        if report is not None:
            report.levels.append(
                {
                    "stride": s,
                    "grid": list(state.grid_shape),
                    "anchors_fitted": n_fit,
                    "anchors_after_prop": int(state.A.sum()),
                    "unresolved": int(state.F.sum()),
                    "step3_iters": it3,
                    "step4_iters": it4,
                    "fallback_filled": filled,
                }
            )
            report.filled_fallback += filled
    return st, state


def refine_sequence(inputs: Sequence[AnchorInput], cfg: RefineConfig | None = None, report: RefineReport | None = None) -> list[DepthFrame]:
    """Refine a frame sequence jointly; temporal edges link consecutive frames."""
    cfg = cfg or RefineConfig()
    st, state = run_levels(inputs, cfg, report)
    s_d, b_d = _expand(st, state, cfg)
    out, ok = _apply(st, s_d, b_d, cfg)
    if report is not None:
        report.objective = _objective(st, state, cfg, out, ok)
    return [DepthFrame(out[f].astype(np.float32), ok[f]) for f in range(out.shape[0])]


def refine_depth(inp: AnchorInput, cfg: RefineConfig | None = None, report: RefineReport | None = None) -> DepthFrame:
    """Refine one frame: ``clamp(D_ff + (s-1) D_ff + b, 1e-6, d_max)``."""
    return refine_sequence([inp], cfg, report)[0]


def _objective(st: _Stack, state: RefineState, cfg: RefineConfig, out: np.ndarray, ok: np.ndarray) -> float:
    m = st.m[:, : st.h, : st.w] & ok
    y = st.y[:, : st.h, : st.w]
    t1 = float(np.sum(np.abs(out[m] - y[m])))
    _, strict, _, _ = _edge_weights(st, cfg, state.level, state.stride)
    t2 = 0.0
    t3 = 0.0
    S, B = state.S, state.B
    non = ~state.fitted
    # forward 4-neighbor edges: right (index 4) and down (index 6)
    for d, (oy, ox) in ((4, (0, 1)), (6, (1, 0))):
        gh, gw = state.grid_shape
        a = (slice(None), slice(0, gh - oy), slice(0, gw - ox))
        b = (slice(None), slice(oy, gh), slice(ox, gw))
        wgt = strict[..., d][a]
        diff = np.abs(S[a] - S[b]) + np.abs(B[a] - B[b])
        t2 += float(np.sum(wgt * diff))
        both = non[a] & non[b]
        t3 += float(np.sum((wgt * diff)[both]))
    return cfg.lambda1 * t1 + cfg.lambda2 * t2 + cfg.lambda3 * t3


def diagnostic_objective(inputs, state: RefineState, cfg: RefineConfig) -> float:
    """Monitoring value of the anchor-alignment plus weighted smoothness objective."""
    d_ff, items = _split_inputs(inputs)
    st = _build_stack(d_ff, items, cfg)
    s_d, b_d = _expand(st, state, cfg)
    out, ok = _apply(st, s_d, b_d, cfg)
    return _objective(st, state, cfg, out, ok)
