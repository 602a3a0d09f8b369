"""Information-addition masks from mesh / point-cloud rendering discrepancies."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import InvalidArgumentError
from .frames import BitMask, DepthFrame, RgbFrame
from .raster import RenderOutput

REL_DEPTH_TOL = 0.03
MIN_COMPONENT = 16
_EIGHT = np.ones((3, 3), dtype=bool)


@dataclass(frozen=True, eq=False)
class MaskBundle:
    hole: BitMask
    curtain_disc: BitMask
    curtain_fb: BitMask
    info_addition: BitMask

    def stats(self) -> dict[str, int]:
        return {
            "hole": self.hole.count(),
            "cdisc": self.curtain_disc.count(),
            "cfb": self.curtain_fb.count(),
            "info": self.info_addition.count(),
        }


def _same_dims(*masks) -> None:
    if len({(m.height, m.width) for m in masks}) > 1:
        raise InvalidArgumentError("mask dimensions differ")


def projection_hole_mask(render: RenderOutput) -> BitMask:
    """Pixels the point-cloud projection does not support."""
    return ~render.support


def curtain_discrepancy_mask(
    mesh_r: RenderOutput, pcd_r: RenderOutput, rel_depth_tol: float = REL_DEPTH_TOL, symmetric: bool = False
) -> BitMask:
    """Mesh-supported pixels the point render misses or places at a different depth.

    With ``symmetric`` every pixel with ``|D_mesh - D_pcd| > tol * D_pcd``
    counts.  By default a mismatch where the points are nearer is kept only
    when 8-connected to a hole or to a pixel where the mesh is nearer.  A
    curtain lies in front of the background points it hides, while an
    isolated points-nearer mismatch is the half-pixel splat bleed of a
    foreground silhouette.
    """
    _same_dims(mesh_r.support, pcd_r.support)
    mesh_s = mesh_r.support.bits
    pcd_s = pcd_r.support.bits
    dm = mesh_r.depth.data.astype(np.float64)
    dp = pcd_r.depth.data.astype(np.float64)
    tol = rel_depth_tol * dp
    cand = mesh_s & (~pcd_s | (np.abs(dm - dp) > tol))
    if symmetric:
        return BitMask(cand)
    seed = mesh_s & (~pcd_s | (dp - dm > tol))
    return BitMask(ndimage.binary_propagation(seed, structure=_EIGHT, mask=cand))


def visible_coverage(layer_r: RenderOutput, scene_r: RenderOutput, rel_depth_tol: float = REL_DEPTH_TOL) -> RenderOutput:
    """Restrict a separately rendered layer to pixels the scene does not occlude.

    A layer pixel survives when the scene render is unsupported there or the
    layer is no farther than ``(1 + rel_depth_tol)`` times the scene depth.
    """
    _same_dims(layer_r.support, scene_r.support)
    dl = layer_r.depth.data.astype(np.float64)
    ds = scene_r.depth.data.astype(np.float64)
    keep = layer_r.support.bits & (~scene_r.support.bits | (dl <= ds * (1.0 + rel_depth_tol)))
    return RenderOutput(
        RgbFrame(np.where(keep[..., None], layer_r.color.data, 0).astype(np.uint8)),
        BitMask(keep),
        DepthFrame(np.where(keep, layer_r.depth.data, 0.0).astype(np.float32), keep),
    )


def remove_small_components(mask: BitMask, min_size: int) -> BitMask:
    """Clear 8-connected components with fewer than ``min_size`` pixels."""
    if min_size < 0:
        raise InvalidArgumentError("min_size must be >= 0")
    if min_size <= 1:
        return BitMask(mask.bits)
    labels, n = ndimage.label(mask.bits, structure=_EIGHT)
    if n == 0:
        return BitMask(mask.bits)
    sizes = np.bincount(labels.ravel())
    keep = sizes >= min_size
    keep[0] = False
    return BitMask(keep[labels])


def info_addition_mask(
    hole: BitMask, curtain_disc: BitMask, curtain_fb: BitMask, min_component: int = MIN_COMPONENT
) -> BitMask:
    """Union of holes and both curtain masks, minus small components."""
    _same_dims(hole, curtain_disc, curtain_fb)
    return remove_small_components(hole | curtain_disc | curtain_fb, min_component)


def mask_bundle(
    pcd_r: RenderOutput,
    mesh_r: RenderOutput,
    curtain_r: RenderOutput | None = None,
    *,
    rel_depth_tol: float = REL_DEPTH_TOL,
    min_component: int = MIN_COMPONENT,
) -> MaskBundle:
    hole = projection_hole_mask(pcd_r)
    cdisc = curtain_discrepancy_mask(mesh_r, pcd_r, rel_depth_tol)
    cfb = curtain_r.support if curtain_r is not None else BitMask.zeros(hole.width, hole.height)
    return MaskBundle(hole, cdisc, cfb, info_addition_mask(hole, cdisc, cfb, min_component))
