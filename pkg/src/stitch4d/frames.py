"""Raster containers and lifting of posed RGB-D frames to explicit geometry."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .camera import Camera, unproject_pixels
from .errors import InvalidArgumentError

_SQUARE3 = np.ones((3, 3), dtype=bool)


@dataclass(frozen=True, eq=False)
class RgbFrame:
    """Row-major 8-bit RGB image, shape ``(height, width, 3)``."""

    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3 or data.shape[2] != 3:
            raise InvalidArgumentError(f"RGB data must be (H, W, 3), got {data.shape}")
        object.__setattr__(self, "data", np.ascontiguousarray(data, dtype=np.uint8))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @classmethod
    def blank(cls, width: int, height: int) -> "RgbFrame":
        return cls(np.zeros((height, width, 3), np.uint8))


@dataclass(frozen=True, eq=False)
class DepthFrame:
    """Float32 depth raster with an explicit validity mask.

    Invalid pixels hold 0.  ``valid`` defaults to ``finite & > 0``.
    """

    data: np.ndarray
    valid: np.ndarray | None = None
    d_max: float = np.inf

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim != 2:
            raise InvalidArgumentError(f"depth data must be 2-D, got {data.shape}")
        ok = np.isfinite(data) & (data > 0) & (data <= self.d_max)
        valid = ok if self.valid is None else (np.asarray(self.valid, dtype=bool) & ok)
        if valid.shape != data.shape:
            raise InvalidArgumentError("validity mask shape does not match depth")
        data = np.where(valid, data, np.float32(0.0))
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "valid", valid)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @classmethod
    def empty(cls, width: int, height: int) -> "DepthFrame":
        return cls(np.zeros((height, width), np.float32))


@dataclass(frozen=True, eq=False)
class BitMask:
    bits: np.ndarray

    def __post_init__(self):
        bits = np.asarray(self.bits)
        if bits.ndim != 2:
            raise InvalidArgumentError(f"mask must be 2-D, got {bits.shape}")
        object.__setattr__(self, "bits", bits.astype(bool, copy=True))

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    def count(self) -> int:
        return int(self.bits.sum())

    def __or__(self, other: "BitMask") -> "BitMask":
        return BitMask(self.bits | other.bits)

    def __and__(self, other: "BitMask") -> "BitMask":
        return BitMask(self.bits & other.bits)

    def __invert__(self) -> "BitMask":
        return BitMask(~self.bits)

    @classmethod
    def zeros(cls, width: int, height: int) -> "BitMask":
        return cls(np.zeros((height, width), bool))


@dataclass(frozen=True, eq=False)
class ColoredPointCloud:
    points: np.ndarray
    colors: np.ndarray
    source_pixel: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        cols = np.asarray(self.colors, dtype=np.uint8).reshape(-1, 3)
        ids = np.asarray(self.source_pixel, dtype=np.int64).reshape(-1)
        if not (len(pts) == len(cols) == len(ids)):
            raise InvalidArgumentError("points, colors and source_pixel lengths differ")
        if not np.all(np.isfinite(pts)):
            raise InvalidArgumentError("point positions must be finite")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "colors", cols)
        object.__setattr__(self, "source_pixel", ids)

    def __len__(self) -> int:
        return len(self.points)

    @classmethod
    def empty(cls) -> "ColoredPointCloud":
        return cls(np.zeros((0, 3)), np.zeros((0, 3), np.uint8), np.zeros(0, np.int64))

    @classmethod
    def concat(cls, clouds) -> "ColoredPointCloud":
        clouds = list(clouds)
        if not clouds:
            return cls.empty()
        return cls(
            np.concatenate([c.points for c in clouds]),
            np.concatenate([c.colors for c in clouds]),
            np.concatenate([c.source_pixel for c in clouds]),
        )


@dataclass(frozen=True, eq=False)
class LatticeMesh:
    vertices: np.ndarray
    colors: np.ndarray
    source_pixel: np.ndarray
    triangles: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), np.int64))

    def __post_init__(self):
        verts = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        cols = np.asarray(self.colors, dtype=np.uint8).reshape(-1, 3)
        ids = np.asarray(self.source_pixel, dtype=np.int64).reshape(-1)
        tris = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if not (len(verts) == len(cols) == len(ids)):
            raise InvalidArgumentError("vertex arrays have different lengths")
        if len(tris):
            if tris.min() < 0 or tris.max() >= len(verts):
                raise InvalidArgumentError("triangle index out of range")
            if np.any((tris[:, 0] == tris[:, 1]) | (tris[:, 1] == tris[:, 2]) | (tris[:, 0] == tris[:, 2])):
                raise InvalidArgumentError("degenerate triangle (repeated vertex)")
        object.__setattr__(self, "vertices", verts)
        object.__setattr__(self, "colors", cols)
        object.__setattr__(self, "source_pixel", ids)
        object.__setattr__(self, "triangles", tris)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    @classmethod
    def empty(cls) -> "LatticeMesh":
        return cls(np.zeros((0, 3)), np.zeros((0, 3), np.uint8), np.zeros(0, np.int64))

    @classmethod
    def concat(cls, meshes) -> "LatticeMesh":
        meshes = list(meshes)
        if not meshes:
            return cls.empty()
        offsets = np.cumsum([0] + [len(m.vertices) for m in meshes[:-1]])
        return cls(
            np.concatenate([m.vertices for m in meshes]),
            np.concatenate([m.colors for m in meshes]),
            np.concatenate([m.source_pixel for m in meshes]),
            np.concatenate([m.triangles + o for m, o in zip(meshes, offsets)]),
        )


def _check_dims(*frames) -> None:
    shapes = {(f.height, f.width) for f in frames if f is not None}
    if len(shapes) > 1:
        raise InvalidArgumentError(f"frame dimensions differ: {sorted(shapes)}")


def lift_point_cloud(rgb: RgbFrame, depth: DepthFrame, cam: Camera) -> ColoredPointCloud:
    """One colored point per valid depth pixel, in row-major pixel order."""
    _check_dims(rgb, depth)
    v, u = np.nonzero(depth.valid)
    pts = unproject_pixels(cam, u, v, depth.data[v, u].astype(np.float64))
    return ColoredPointCloud(pts, rgb.data[v, u], v * depth.width + u)


def _sobel_flip(rgb: RgbFrame, quad_ok: np.ndarray, min_grad: float) -> np.ndarray:
    gray = rgb.data.astype(np.float64) @ np.array([0.299, 0.587, 0.114])
    gx = ndimage.sobel(gray, axis=1)
    gy = ndimage.sobel(gray, axis=0)
    # mean gradient over the four pixels of each quad
    qgx = 0.25 * (gx[:-1, :-1] + gx[:-1, 1:] + gx[1:, :-1] + gx[1:, 1:])
    qgy = 0.25 * (gy[:-1, :-1] + gy[:-1, 1:] + gy[1:, :-1] + gy[1:, 1:])
    # edge tangent is perpendicular to the gradient; (1,1) is the TL-BR diagonal
    along_main = np.abs(-qgy + qgx)
    along_anti = np.abs(qgy + qgx)
    strong = np.hypot(qgx, qgy) >= min_grad
    return quad_ok & strong & (along_anti > along_main)


def lift_lattice_mesh(
    rgb: RgbFrame,
    depth: DepthFrame,
    cam: Camera,
    *,
    sobel_flip: bool = False,
    sobel_min_grad: float = 8.0,
    max_depth_ratio: float | None = None,
) -> LatticeMesh:
    """Triangulate the image lattice over valid pixels.

    Every 2x2 quad of valid pixels yields two triangles split along the
    top-left/bottom-right diagonal.  ``sobel_flip`` switches a quad to the
    other diagonal when the local image edge runs along it.  With
    ``max_depth_ratio`` set, triangles whose max/min vertex depth exceeds the
    ratio are dropped, which removes curtains across depth discontinuities.
    """
    _check_dims(rgb, depth)
    h, w = depth.height, depth.width
    valid = depth.valid
    index = np.full((h, w), -1, dtype=np.int64)
    v, u = np.nonzero(valid)
    index[v, u] = np.arange(len(v))
    verts = unproject_pixels(cam, u, v, depth.data[v, u].astype(np.float64))
    mesh_colors = rgb.data[v, u]
    ids = v * w + u

    if h < 2 or w < 2:
        return LatticeMesh(verts, mesh_colors, ids)
    tl, tr = index[:-1, :-1], index[:-1, 1:]
    bl, br = index[1:, :-1], index[1:, 1:]
    quad_ok = (tl >= 0) & (tr >= 0) & (bl >= 0) & (br >= 0)
    flip = _sobel_flip(rgb, quad_ok, sobel_min_grad) if sobel_flip else np.zeros_like(quad_ok)
    keep = quad_ok & ~flip
    alt = quad_ok & flip
    tris = np.concatenate(
        [
            np.stack([tl[keep], tr[keep], br[keep]], axis=1),
            np.stack([tl[keep], br[keep], bl[keep]], axis=1),
            np.stack([tl[alt], tr[alt], bl[alt]], axis=1),
            np.stack([tr[alt], br[alt], bl[alt]], axis=1),
        ]
    )
    if max_depth_ratio is not None and len(tris):
        z = depth.data[v, u].astype(np.float64)[tris]
        tris = tris[z.max(axis=1) <= max_depth_ratio * z.min(axis=1)]
    # row-major quad order for deterministic output
    if len(tris):
        tris = tris[np.lexsort((tris[:, 2], tris[:, 1], tris[:, 0]))]
    return LatticeMesh(verts, mesh_colors, ids, tris)


def boundary_ring(mask: BitMask, thickness: int = 1) -> BitMask:
    """Mask pixels within Chebyshev distance ``thickness`` of a non-mask pixel.

    The image border is not a transition.
    """
    if thickness < 1:
        raise InvalidArgumentError("thickness must be >= 1")
    bits = mask.bits
    near_outside = ndimage.binary_dilation(~bits, structure=_SQUARE3, iterations=thickness, border_value=0)
    return BitMask(bits & near_outside)


def build_fgbg_curtain(
    fg_depth: DepthFrame,
    bg_depth: DepthFrame,
    fg_mask: BitMask,
    cam: Camera,
    *,
    thickness: int = 1,
    rgb: RgbFrame | None = None,
) -> LatticeMesh:
    """Curtain mesh joining foreground and background points on shared rays.

    For each pair of 8-adjacent foreground boundary-ring pixels a quad links
    their foreground and background points.  Ring pixels without valid depth
    in both layers, or with background nearer than foreground, are skipped.
    Vertex colors come from ``rgb`` at the ring pixel, or mid-gray.
    """
    _check_dims(fg_depth, bg_depth, fg_mask, rgb)
    h, w = fg_mask.height, fg_mask.width
    ring = boundary_ring(fg_mask, thickness).bits
    ring &= fg_depth.valid & bg_depth.valid & (bg_depth.data >= fg_depth.data)
    v, u = np.nonzero(ring)
    n = len(v)
    if n == 0:
        return LatticeMesh.empty()
    index = np.full((h, w), -1, dtype=np.int64)
    index[v, u] = np.arange(n)
    fg_pts = unproject_pixels(cam, u, v, fg_depth.data[v, u].astype(np.float64))
    bg_pts = unproject_pixels(cam, u, v, bg_depth.data[v, u].astype(np.float64))
    verts = np.concatenate([fg_pts, bg_pts])
    if rgb is None:
        cols = np.full((n, 3), 128, np.uint8)
    else:
        cols = rgb.data[v, u]
    ids = v * w + u

    tris = []
    for dv, du in ((0, 1), (1, 0), (1, 1), (1, -1)):
        vq, uq = v + dv, u + du
        inside = (vq < h) & (uq >= 0) & (uq < w)
        p = np.arange(n)[inside]
        q = index[vq[inside], uq[inside]]
        ok = q >= 0
        p, q = p[ok], q[ok]
        tris.append(np.stack([p, q, q + n], axis=1))
        tris.append(np.stack([p, q + n, p + n], axis=1))
    tris = np.concatenate(tris)
    return LatticeMesh(verts, np.concatenate([cols, cols]), np.concatenate([ids, ids]), tris)


def depth_edges(depth: DepthFrame, lap_thresh: float | None = None) -> np.ndarray:
    """Depth-discontinuity mask: ``|Laplacian| > lap_thresh``, closed then dilated (3x3).

    The default threshold is 0.05 x the median valid depth.
    """
    d = depth.data.astype(np.float64)
    valid = depth.valid
    if lap_thresh is None:
        lap_thresh = 0.05 * float(np.median(d[valid])) if valid.any() else np.inf
    lap = laplacian5(d, valid)
    edges = np.abs(lap) > lap_thresh
    edges = ndimage.binary_closing(edges, structure=_SQUARE3, border_value=0)
    # binary_closing erodes at the border; keep raw detections there too
    edges |= np.abs(lap) > lap_thresh
    return ndimage.binary_dilation(edges, structure=_SQUARE3)


def laplacian5(d: np.ndarray, valid: np.ndarray | None = None) -> np.ndarray:
    """5-point Laplacian; 0 wherever the stencil touches an invalid pixel.

    The frame is extended by linear extrapolation, so planes have zero
    Laplacian up to the image border.  Works on the last two axes.
    """
    d = np.asarray(d, dtype=np.float64)
    if valid is None:
        valid = np.isfinite(d) & (d > 0)
    pad = [(0, 0)] * (d.ndim - 2) + [(1, 1), (1, 1)]
    if min(d.shape[-2:]) < 2:
        dp = np.pad(np.where(valid, d, 0.0), pad, mode="edge")
        vp = np.pad(valid, pad, mode="edge")
    else:
        dp = np.pad(np.where(valid, d, 0.0), pad, mode="reflect", reflect_type="odd")
        vp = np.pad(valid, pad, mode="reflect")
    c = dp[..., 1:-1, 1:-1]
    lap = dp[..., :-2, 1:-1] + dp[..., 2:, 1:-1] + dp[..., 1:-1, :-2] + dp[..., 1:-1, 2:] - 4.0 * c
    ok = vp[..., 1:-1, 1:-1] & vp[..., :-2, 1:-1] & vp[..., 2:, 1:-1] & vp[..., 1:-1, :-2] & vp[..., 1:-1, 2:]
    return np.where(ok, lap, 0.0)
