"""Render a merged asset along an interpolated camera path."""

from __future__ import annotations

from pathlib import Path

from ..camera import Camera, CameraRecord, interpolate_pose, save_manifest
from ..errors import InvalidArgumentError
from ..io import write_pfm, write_rgb
from ..raster import RenderOutput
from ..stitch import SceneAsset


def path_cameras(cam0: Camera, cam1: Camera, n_frames: int) -> list[Camera]:
    """``n_frames`` poses at ``a = k / (n - 1)``; the endpoints are the inputs themselves."""
    if n_frames < 2:
        raise InvalidArgumentError("n_frames must be >= 2")
    cams = [interpolate_pose(cam0, cam1, k / (n_frames - 1)) for k in range(n_frames)]
    cams[0], cams[-1] = cam0, cam1
    return cams


def render_novel_views(
    asset: SceneAsset,
    cam0: Camera,
    cam1: Camera,
    n_frames: int,
    width: int,
    height: int,
    out_dir=None,
    time_frames: list[int] | None = None,
) -> list[RenderOutput]:
    """Render ``asset`` at each interpolated pose, optionally writing PNG/PFM pairs.

    Frame ``k`` shows asset time ``time_frames[k]``; by default the asset's
    first frame is held for a static fly-through.
    """
    cams = path_cameras(cam0, cam1, n_frames)
    if time_frames is None:
        frames = asset.frames or [0]
        time_frames = [frames[0]] * n_frames
    if len(time_frames) != n_frames:
        raise InvalidArgumentError("time_frames must have one entry per output frame")
    out = []
    records = []
    for k, (cam, t) in enumerate(zip(cams, time_frames)):
        r = asset.render(cam, width, height, t)
        out.append(r)
        if out_dir is not None:
            d = Path(out_dir)
            write_rgb(d / f"frame_{k:04d}.png", r.color)
            write_pfm(d / f"depth_{k:04d}.pfm", r.depth)
            records.append(CameraRecord("novel", k, cam, width, height))
    if out_dir is not None:
        save_manifest(Path(out_dir) / "cameras.json", records)
    return out
