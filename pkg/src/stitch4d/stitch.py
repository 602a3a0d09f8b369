"""Stitch candidates, render-disagreement filtering and the layered scene asset."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .camera import Camera, project_points, unproject_pixels
from .errors import InvalidArgumentError, MissingDepthError, ProvenanceConflictError
from .frames import BitMask, ColoredPointCloud, DepthFrame, LatticeMesh, RgbFrame
from .io import atomic_write_text, read_ply, write_ply
from .raster import MAX_SCREEN, NEAR, RenderOutput, render_mesh, render_points, snap

DEPTH_TOL = 0.05
VOTE_FRAC = 0.5
OCCLUSION_MARGIN = 0.05


def _over(base: RenderOutput, top: RenderOutput, margin: float) -> RenderOutput:
    """``top`` fills pixels unsupported in ``base`` or nearer by more than ``margin``."""
    bs, ts = base.support.bits, top.support.bits
    use = ts & (~bs | (top.depth.data < base.depth.data * (1.0 - margin)))
    support = bs | ts
    color = np.where(use[..., None], top.color.data, base.color.data)
    depth = np.where(use, top.depth.data, base.depth.data)
    return RenderOutput(RgbFrame(color), BitMask(support), DepthFrame(depth, support))


@dataclass(frozen=True)
class Provenance:
    source_view: str
    target_view: str
    step: int
    frame: int

    @property
    def key(self) -> tuple:
        return (self.source_view, self.target_view, self.step, self.frame)


@dataclass(frozen=True, eq=False)
class AssetLayer:
    provenance: Provenance
    geometry: ColoredPointCloud | LatticeMesh

    @property
    def kind(self) -> str:
        return "mesh" if isinstance(self.geometry, LatticeMesh) else "points"


@dataclass(frozen=True, eq=False)
class SceneAsset:
    """Immutable, time-indexed collection of provenance-tagged geometry layers.

    A layer's provenance key ``(source, target, step, frame)`` is unique per
    geometry kind, so a frame may hold a mesh and a point layer from the same
    capture.
    """

    layers: tuple[AssetLayer, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        seen = set()
        for layer in self.layers:
            k = (layer.kind,) + layer.provenance.key
            if k in seen:
                raise ProvenanceConflictError(f"duplicate layer provenance {k}")
            seen.add(k)

    @property
    def frames(self) -> list[int]:
        return sorted({layer.provenance.frame for layer in self.layers})

    def layers_for(self, frame: int) -> list[AssetLayer]:
        return [layer for layer in self.layers if layer.provenance.frame == frame]

    def with_layer(self, layer: AssetLayer) -> "SceneAsset":
        return SceneAsset(self.layers + (layer,))

    def render(self, cam: Camera, width: int, height: int, frame: int, occlusion_margin: float = OCCLUSION_MARGIN) -> RenderOutput:
        """Composite render of all layers of ``frame``.

        Layers are grouped by expansion step.  Within a group, meshes take
        priority and points fill pixels the meshes leave unsupported, or
        replace mesh pixels when nearer by more than ``occlusion_margin``
        times the mesh depth.  Later groups are composited over earlier ones
        with the same rule, so added content never overwrites a previously
        supported pixel unless it is clearly in front of it.
        """
        layers = self.layers_for(frame)
        steps = sorted({l.provenance.step for l in layers})
        out = None
        for step in steps or [0]:
            group = [l for l in layers if l.provenance.step == step]
            meshes = [l.geometry for l in group if l.kind == "mesh"]
            clouds = [l.geometry for l in group if l.kind == "points"]
            r = render_mesh(LatticeMesh.concat(meshes), cam, width, height)
            if clouds:
                r = _over(r, render_points(ColoredPointCloud.concat(clouds), cam, width, height), occlusion_margin)
            out = r if out is None else _over(out, r, occlusion_margin)
        return out

    # -- persistence --------------------------------------------------------

    def save(self, directory, cameras: dict | None = None) -> None:
        """Write ``asset.json`` plus one PLY per layer."""
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        entries = []
        for i, layer in enumerate(self.layers):
            p = layer.provenance
            name = f"layer_{i:04d}_{layer.kind}_f{p.frame:04d}.ply"
            write_ply(d / name, layer.geometry)
            entries.append(
                {
                    "file": name,
                    "kind": layer.kind,
                    "source_view": p.source_view,
                    "target_view": p.target_view,
                    "step": p.step,
                    "frame": p.frame,
                    "n_vertices": len(layer.geometry.vertices if layer.kind == "mesh" else layer.geometry.points),
                }
            )
        doc = {"layers": entries, "cameras": cameras or {}}
        atomic_write_text(d / "asset.json", json.dumps(doc, indent=1, sort_keys=True) + "\n")

    @classmethod
    def load(cls, directory) -> "SceneAsset":
        d = Path(directory)
        with open(d / "asset.json") as f:
            doc = json.load(f)
        layers = []
        for e in doc["layers"]:
            geom = read_ply(d / e["file"])
            if (e["kind"] == "mesh") != isinstance(geom, LatticeMesh):
                raise InvalidArgumentError(f"{e['file']}: geometry kind does not match manifest")
            prov = Provenance(e["source_view"], e["target_view"], int(e["step"]), int(e["frame"]))
            layers.append(AssetLayer(prov, geom))
        return cls(tuple(layers))


@dataclass(frozen=True, eq=False)
class StitchCandidate:
    points: ColoredPointCloud
    origin_mask: BitMask
    target_cam: Camera
    frame_idx: int

    def __post_init__(self):
        if len(self.points) != self.origin_mask.count():
            raise InvalidArgumentError("candidate needs exactly one point per mask pixel")


def build_stitch_candidates(
    completed_rgb: RgbFrame, refined_depth: DepthFrame, mask: BitMask, target_cam: Camera, frame_idx: int
) -> StitchCandidate:
    """Back-project masked target pixels with their refined depth and completed color."""
    dims = {(f.height, f.width) for f in (completed_rgb, refined_depth, mask)}
    if len(dims) != 1:
        raise InvalidArgumentError("dimension mismatch")
    vs, us = np.nonzero(mask.bits)
    missing = ~refined_depth.valid[vs, us]
    if missing.any():
        i = int(np.argmax(missing))
        raise MissingDepthError(int(us[i]), int(vs[i]))
    d = refined_depth.data[vs, us].astype(np.float64)
    pts = unproject_pixels(target_cam, us, vs, d).reshape(-1, 3)
    ids = vs.astype(np.int64) * mask.width + us
    pc = ColoredPointCloud(pts, completed_rgb.data[vs, us], ids)
    return StitchCandidate(pc, BitMask(mask.bits), target_cam, int(frame_idx))


def disagreement_votes(
    points: np.ndarray, anchor: RenderOutput, cam: Camera, depth_tol: float = DEPTH_TOL
) -> tuple[np.ndarray, np.ndarray]:
    """Per-point ``(visible, disagrees)`` flags for one observed view.

    A point is visible when its splat footprint (the pixels it would receive
    positive bilinear weight on) touches the frame in front of the near
    plane.  It disagrees when any footprint pixel is anchor-supported and the
    point is nearer than ``(1 - depth_tol)`` times that pixel's anchor depth.
    """
    u, v, z = project_points(cam, points)
    n = len(z)
    vis = np.zeros(n, bool)
    dis = np.zeros(n, bool)
    with np.errstate(invalid="ignore"):
        ok = np.isfinite(u) & np.isfinite(v) & (z > NEAR) & (np.abs(u) < MAX_SCREEN) & (np.abs(v) < MAX_SCREEN)
    if not ok.any():
        return vis, dis
    x, y = snap(u[ok]), snap(v[ok])
    x0, y0 = np.floor(x), np.floor(y)
    fx, fy = x - x0, y - y0
    zo = z[ok]
    for dx in (0, 1):
        for dy in (0, 1):
            w = (fx if dx else 1.0 - fx) * (fy if dy else 1.0 - fy)
            px = (x0 + dx).astype(np.int64)
            py = (y0 + dy).astype(np.int64)
            inside = (w > 0) & (px >= 0) & (py >= 0) & (px < anchor.width) & (py < anchor.height)
            ix, iy = np.where(inside, px, 0), np.where(inside, py, 0)
            sup = inside & anchor.support.bits[iy, ix]
            da = anchor.depth.data[iy, ix].astype(np.float64)
            vis[ok] |= inside
            dis[ok] |= sup & (zo < da * (1.0 - depth_tol))
    return vis, dis


def render_disagreement_filter(
    candidate: StitchCandidate,
    asset: SceneAsset,
    observed_cams: Sequence[Camera],
    width: int,
    height: int,
    depth_tol: float = DEPTH_TOL,
    vote_frac: float = VOTE_FRAC,
) -> StitchCandidate:
    """Drop candidate points that would occlude verified geometry in observed views.

    The anchor render of ``asset`` is computed per observed camera.  Points
    whose disagreement count reaches ``vote_frac`` of their visible-view
    count are removed; points never visible are kept.
    """
    if not observed_cams:
        raise InvalidArgumentError("at least one observed camera is required")
    pts = candidate.points.points
    n_vis = np.zeros(len(pts), np.int64)
    n_dis = np.zeros(len(pts), np.int64)
    if len(pts):
        for cam in observed_cams:
            anchor = asset.render(cam, width, height, candidate.frame_idx)
            vis, dis = disagreement_votes(pts, anchor, cam, depth_tol)
            n_vis += vis
            n_dis += dis
    remove = (n_vis > 0) & (n_dis >= vote_frac * n_vis)
    keep = ~remove
    pc = candidate.points
    kept = ColoredPointCloud(pc.points[keep], pc.colors[keep], pc.source_pixel[keep])
    mask = np.zeros(candidate.origin_mask.bits.size, bool)
    mask[kept.source_pixel] = True
    return StitchCandidate(
        kept, BitMask(mask.reshape(candidate.origin_mask.bits.shape)), candidate.target_cam, candidate.frame_idx
    )


def merge_asset(asset: SceneAsset, candidate: StitchCandidate, source_view: str, target_view: str, step: int) -> SceneAsset:
    """Append the candidate as a new point layer; existing layers are shared untouched."""
    prov = Provenance(source_view, target_view, int(step), candidate.frame_idx)
    return asset.with_layer(AssetLayer(prov, candidate.points))


def initial_asset(frames: Iterable[tuple[int, LatticeMesh, ColoredPointCloud]], source_view: str) -> SceneAsset:
    """Asset holding, per frame, the lifted source mesh and point cloud (step 0)."""
    layers = []
    for frame, mesh, pc in frames:
        prov = Provenance(source_view, source_view, 0, int(frame))
        layers.append(AssetLayer(prov, mesh))
        layers.append(AssetLayer(prov, pc))
    return SceneAsset(tuple(layers))
