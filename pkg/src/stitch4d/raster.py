"""Software rendering of point clouds and lattice meshes into a camera.

Projected coordinates are snapped to a 1/65536-pixel fixed-point grid before
coverage tests, so shared triangle edges are watertight and the half-open
top-left fill rule is exact.  Point splats use the same snapping, so a point
that projects onto a pixel center touches only that pixel.
"""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from .camera import Camera, project_points
from .frames import BitMask, ColoredPointCloud, DepthFrame, LatticeMesh, RgbFrame

NEAR = 1e-4
SPLAT_REL_TOL = 0.01
SPLAT_W_MIN = 0.05
SUBPIXEL_BITS = 16
SUBPIXEL = 1 << SUBPIXEL_BITS
# int64 edge functions stay exact for |coord| < 2**13 px at 16 subpixel bits
MAX_SCREEN = float(1 << 13)


@dataclass(frozen=True, eq=False)
class RenderOutput:
    color: RgbFrame
    support: BitMask
    depth: DepthFrame

    @property
    def width(self) -> int:
        return self.support.width

    @property
    def height(self) -> int:
        return self.support.height


def snap(x: np.ndarray) -> np.ndarray:
    """Round screen coordinates to the fixed-point subpixel grid."""
    return np.round(np.asarray(x, dtype=np.float64) * SUBPIXEL) / SUBPIXEL


def _camera_space(cam: Camera, X: np.ndarray):
    u, v, z = project_points(cam, X)
    ok = np.isfinite(u) & np.isfinite(v) & (z > NEAR)
    ok &= (np.abs(u) < MAX_SCREEN) & (np.abs(v) < MAX_SCREEN)
    return u, v, z, ok


def _finish(width, height, depth, weight_ok, color):
    support = weight_ok
    return RenderOutput(
        RgbFrame(np.where(support[..., None], color, 0).astype(np.uint8)),
        BitMask(support),
        DepthFrame(np.where(support, depth, 0.0).astype(np.float32), support),
    )


# ---------------------------------------------------------------------------
# Point splatting
# ---------------------------------------------------------------------------


@numba.njit(cache=True)
def _splat_kernel(x, y, z, colors, width, height, rel_tol):
    n = x.shape[0]
    zmin = np.full((height, width), np.inf)
    for i in range(n):
        x0 = int(np.floor(x[i]))
        y0 = int(np.floor(y[i]))
        fx = x[i] - x0
        fy = y[i] - y0
        for k in range(4):
            dx = k & 1
            dy = k >> 1
            wgt = (fx if dx else 1.0 - fx) * (fy if dy else 1.0 - fy)
            px = x0 + dx
            py = y0 + dy
            if wgt <= 0.0 or px < 0 or py < 0 or px >= width or py >= height:
                continue
            if z[i] < zmin[py, px]:
                zmin[py, px] = z[i]
    wsum = np.zeros((height, width))
    zsum = np.zeros((height, width))
    csum = np.zeros((height, width, 3))
    for i in range(n):
        x0 = int(np.floor(x[i]))
        y0 = int(np.floor(y[i]))
        fx = x[i] - x0
        fy = y[i] - y0
        for k in range(4):
            dx = k & 1
            dy = k >> 1
            wgt = (fx if dx else 1.0 - fx) * (fy if dy else 1.0 - fy)
            px = x0 + dx
            py = y0 + dy
            if wgt <= 0.0 or px < 0 or py < 0 or px >= width or py >= height:
                continue
            zm = zmin[py, px]
            if z[i] - zm > rel_tol * zm:
                continue
            wsum[py, px] += wgt
            zsum[py, px] += wgt * z[i]
            for c in range(3):
                csum[py, px, c] += wgt * colors[i, c]
    return wsum, zsum, csum


def render_points(
    pc: ColoredPointCloud,
    cam: Camera,
    width: int,
    height: int,
    *,
    rel_tol: float = SPLAT_REL_TOL,
    w_min: float = SPLAT_W_MIN,
) -> RenderOutput:
    """Bilinear splatting with depth-ordered visibility.

    Each point in front of the near plane spreads bilinear weights over its
    four enclosing pixels.  Per pixel, contributions farther than
    ``rel_tol * z_min`` behind the nearest one are discarded; the rest are
    weight-blended.  A pixel is supported when the surviving weight is at
    least ``w_min``.
    """
    if width <= 0 or height <= 0:
        raise ValueError("width and height must be positive")
    u, v, z, ok = _camera_space(cam, pc.points)
    wsum, zsum, csum = _splat_kernel(
        snap(u[ok]), snap(v[ok]), z[ok], pc.colors[ok].astype(np.float64), int(width), int(height), float(rel_tol)
    )
    support = wsum >= w_min
    safe = np.where(support, wsum, 1.0)
    depth = zsum / safe
    color = np.clip(np.rint(csum / safe[..., None]), 0, 255)
    return _finish(width, height, depth, support, color)


# ---------------------------------------------------------------------------
# Triangle rasterization
# ---------------------------------------------------------------------------


@numba.njit(cache=True, inline="always")
def _edge(ax, ay, bx, by, px, py):
    return (bx - ax) * (py - ay) - (by - ay) * (px - ax)


@numba.njit(cache=True, inline="always")
def _top_left(ax, ay, bx, by):
    dy = by - ay
    return dy < 0 or (dy == 0 and bx - ax > 0)


@numba.njit(cache=True)
def _raster_kernel(xs, ys, z, attrs, tris, width, height, near):
    n_attr = attrs.shape[1]
    zbuf = np.full((height, width), np.inf)
    abuf = np.zeros((height, width, n_attr))
    for t in range(tris.shape[0]):
        i0 = tris[t, 0]
        i1 = tris[t, 1]
        i2 = tris[t, 2]
        if z[i0] <= near or z[i1] <= near or z[i2] <= near:
            continue
        x0 = xs[i0]
        y0 = ys[i0]
        x1 = xs[i1]
        y1 = ys[i1]
        x2 = xs[i2]
        y2 = ys[i2]
        area = _edge(x0, y0, x1, y1, x2, y2)
        if area == 0:
            continue
        if area < 0:
            # enforce one winding; no back-face culling
            i1, i2 = i2, i1
            x1, x2 = x2, x1
            y1, y2 = y2, y1
            area = -area
        xmin = max(0, -((-min(x0, min(x1, x2))) >> 16))
        xmax = min(width - 1, max(x0, max(x1, x2)) >> 16)
        ymin = max(0, -((-min(y0, min(y1, y2))) >> 16))
        ymax = min(height - 1, max(y0, max(y1, y2)) >> 16)
        if xmin > xmax or ymin > ymax:
            continue
        tl0 = _top_left(x1, y1, x2, y2)
        tl1 = _top_left(x2, y2, x0, y0)
        tl2 = _top_left(x0, y0, x1, y1)
        iz0 = 1.0 / z[i0]
        iz1 = 1.0 / z[i1]
        iz2 = 1.0 / z[i2]
        farea = float(area)
        for py in range(ymin, ymax + 1):
            sy = py << 16
            for px in range(xmin, xmax + 1):
                sx = px << 16
                w0 = _edge(x1, y1, x2, y2, sx, sy)
                if w0 < 0 or (w0 == 0 and not tl0):
                    continue
                w1 = _edge(x2, y2, x0, y0, sx, sy)
                if w1 < 0 or (w1 == 0 and not tl1):
                    continue
                w2 = _edge(x0, y0, x1, y1, sx, sy)
                if w2 < 0 or (w2 == 0 and not tl2):
                    continue
                l0 = w0 / farea
                l1 = w1 / farea
                l2 = w2 / farea
                inv = l0 * iz0 + l1 * iz1 + l2 * iz2
                zz = 1.0 / inv
                if zz < zbuf[py, px]:
                    zbuf[py, px] = zz
                    p0 = l0 * iz0 * zz
                    p1 = l1 * iz1 * zz
                    p2 = l2 * iz2 * zz
                    for c in range(n_attr):
                        abuf[py, px, c] = p0 * attrs[i0, c] + p1 * attrs[i1, c] + p2 * attrs[i2, c]
    return zbuf, abuf


def rasterize_attributes(
    vertices: np.ndarray,
    triangles: np.ndarray,
    attrs: np.ndarray,
    cam: Camera,
    width: int,
    height: int,
) -> tuple[np.ndarray, np.ndarray]:
    """Z-buffered rasterization of arbitrary per-vertex float attributes.

    Returns ``(depth, attributes)`` where uncovered pixels have depth inf.
    Attributes are interpolated perspective-correctly.
    """
    u, v, z, ok = _camera_space(cam, vertices)
    xs = np.where(ok, np.round(np.nan_to_num(u) * SUBPIXEL), 0).astype(np.int64)
    ys = np.where(ok, np.round(np.nan_to_num(v) * SUBPIXEL), 0).astype(np.int64)
    zc = np.where(ok, z, -1.0)  # out-of-range vertices fail the near test
    attrs = np.asarray(attrs, dtype=np.float64)
    n_attr = attrs.shape[-1] if attrs.ndim == 2 else (attrs.size // max(len(vertices), 1))
    attrs = np.ascontiguousarray(attrs.reshape(len(vertices), n_attr))
    tris = np.ascontiguousarray(np.asarray(triangles, dtype=np.int64).reshape(-1, 3))
    return _raster_kernel(xs, ys, zc, attrs, tris, int(width), int(height), NEAR)


def render_mesh(mesh: LatticeMesh, cam: Camera, width: int, height: int, want_color: bool = True) -> RenderOutput:
    """Rasterize a mesh with perspective-correct interpolation and a z-buffer.

    Triangles with any vertex at or behind the near plane are dropped.
    """
    if width <= 0 or height <= 0:
        raise ValueError("width and height must be positive")
    attrs = mesh.colors.astype(np.float64) if want_color else np.zeros((len(mesh.vertices), 0))
    zbuf, abuf = rasterize_attributes(mesh.vertices, mesh.triangles, attrs, cam, width, height)
    support = np.isfinite(zbuf)
    color = np.clip(np.rint(abuf), 0, 255) if want_color else np.zeros((height, width, 3))
    return _finish(width, height, np.where(support, zbuf, 0.0), support, color)
