"""One expansion step: source view geometry grown with content completed at a target view.

Per frame the stages are preprocess, lift, render into the target, mask
construction, completion exchange, depth refinement against the anchor
render, curtain lower bound, candidate back-projection, disagreement
filtering and merge.  Frames are prepared by a bounded worker pool;
refinement runs once over the whole sequence so temporal links are used;
the asset is merged by the coordinator in frame order.
"""

from __future__ import annotations

import json
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..addmask import MaskBundle, mask_bundle, visible_coverage
from ..camera import Camera, load_manifest, manifest_lookup
from ..errors import ExchangeTimeoutError, FrameError, InvalidArgumentError, Stitch4DError
from ..frames import (
    BitMask,
    DepthFrame,
    RgbFrame,
    build_fgbg_curtain,
    lift_lattice_mesh,
    lift_point_cloud,
)
from ..io import atomic_write_text, read_mask, read_pfm, read_rgb, write_mask, write_pfm
from ..preprocess import depth_spikefix, edge_mapping, occlusion_mask_refine
from ..raster import render_mesh, render_points
from ..refine import AnchorInput, RefineReport, curtain_lower_bound, refine_sequence
from ..stitch import SceneAsset, build_stitch_candidates, initial_asset, merge_asset, render_disagreement_filter
from .config import PipelineConfig
from .exchange import await_completion, oracle_respond, post_request
from .synthetic import frame_paths


@dataclass
class FrameWork:
    """Per-frame intermediate results carried between pipeline phases."""

    frame: int
    src_cam: Camera
    tgt_cam: Camera
    masks: MaskBundle
    raw_union: np.ndarray
    anchor: DepthFrame
    d_curtain: DepthFrame
    completed: RgbFrame | None = None
    d_ff: DepthFrame | None = None


class _Timer:
    def __init__(self):
        self.totals: dict[str, float] = {}
        self._lock = threading.Lock()

    def add(self, stage: str, seconds: float) -> None:
        with self._lock:
            self.totals[stage] = self.totals.get(stage, 0.0) + seconds

    def run(self, stage: str, fn, *args, **kw):
        t0 = time.perf_counter()
        try:
            return fn(*args, **kw)
        finally:
            self.add(stage, time.perf_counter() - t0)


def _stage(frame: int, stage: str, timer: _Timer, fn, *args, **kw):
    try:
        return timer.run(stage, fn, *args, **kw)
    except ExchangeTimeoutError:
        raise
    except Stitch4DError as exc:
        raise FrameError(frame, stage, exc) from exc


def _load_source(cfg: PipelineConfig, frame: int):
    p = frame_paths(cfg.data_dir, cfg.source_view, frame)
    rgb, depth = read_rgb(p["rgb"]), read_pfm(p["depth"])
    if (rgb.width, rgb.height) != (cfg.width, cfg.height):
        raise InvalidArgumentError(
            f"source frame is {rgb.width}x{rgb.height}, config expects {cfg.width}x{cfg.height}"
        )
    fg = read_mask(p["fg"]) if p["fg"].exists() else None
    bg = None
    if cfg.use_bg_layers and p["bgdepth"].exists():
        bg = read_pfm(p["bgdepth"])
    return rgb, depth, fg, bg


def _preprocess(cfg: PipelineConfig, rgb, depth, fg):
    if cfg.preprocess:
        depth = depth_spikefix(depth, window=cfg.spike_window, mad_k=cfg.spike_mad_k)
    if cfg.edge_map:
        rgb, depth = edge_mapping(rgb, depth)
    if cfg.mask_refine and fg is not None:
        fg = occlusion_mask_refine(fg, depth)
    return rgb, depth, fg


def _curtain_depth(mesh_r, pcd_r, curtain_r, masks: MaskBundle) -> DepthFrame:
    """Depth of spurious curtain surfaces: a lower bound for revealed content."""
    dm = mesh_r.depth.data.astype(np.float64)
    dp = pcd_r.depth.data.astype(np.float64)
    lattice = masks.curtain_disc.bits & (~pcd_r.support.bits | (dm < dp))
    d = np.where(lattice, dm, np.inf)
    if curtain_r is not None:
        fb = masks.curtain_fb.bits & curtain_r.support.bits
        d = np.where(fb, np.minimum(d, curtain_r.depth.data), d)
    ok = np.isfinite(d)
    return DepthFrame(np.where(ok, d, 0.0).astype(np.float32), ok)


def _prepare(cfg, frame, cams, asset: SceneAsset, geometry, timer: _Timer) -> FrameWork:
    src_cam, tgt_cam = cams
    rgb, depth, fg, bg, mesh_raw, pc = geometry
    W, H = cfg.width, cfg.height
    pcd_r = _stage(frame, "render", timer, render_points, pc, tgt_cam, W, H)
    mesh_r = _stage(frame, "render", timer, render_mesh, mesh_raw, tgt_cam, W, H)
    curtain_r = None
    if fg is not None and bg is not None and fg.bits.any():
        curtain = _stage(
            frame, "lift", timer, build_fgbg_curtain, depth, bg, fg, src_cam,
            thickness=cfg.curtain_thickness, rgb=rgb,
        )
        curtain_r = _stage(frame, "render", timer, render_mesh, curtain, tgt_cam, W, H)
        curtain_r = visible_coverage(curtain_r, pcd_r, cfg.curtain_visibility_tol)
    masks = _stage(
        frame, "masks", timer, mask_bundle, pcd_r, mesh_r, curtain_r,
        rel_depth_tol=cfg.rel_depth_tol, min_component=cfg.min_component,
    )
    raw = masks.hole.bits | masks.curtain_disc.bits | masks.curtain_fb.bits
    anchor_r = _stage(frame, "render", timer, asset.render, tgt_cam, W, H, frame, cfg.occlusion_margin)
    d_curtain = _curtain_depth(mesh_r, pcd_r, curtain_r, masks)
    work = FrameWork(frame, src_cam, tgt_cam, masks, raw, anchor_r.depth, d_curtain)
    sd = Path(cfg.work_dir) / "stages" / f"f{frame:04d}"
    write_mask(sd / "hole.png", masks.hole)
    write_mask(sd / "curtain_disc.png", masks.curtain_disc)
    write_mask(sd / "curtain_fb.png", masks.curtain_fb)
    write_mask(sd / "info_addition.png", masks.info_addition)
    write_pfm(sd / "anchor_depth.pfm", anchor_r.depth)
    work.completed, work.d_ff = _exchange(cfg, frame, anchor_r.color, masks.info_addition, timer)
    return work


def _exchange(cfg: PipelineConfig, frame: int, projected: RgbFrame, mask: BitMask, timer: _Timer):
    t0 = time.perf_counter()
    rec = post_request(Path(cfg.work_dir) / "exchange", cfg.target_view, frame, projected, mask)
    if cfg.completer == "oracle":
        p = frame_paths(cfg.data_dir, cfg.target_view, frame)
        if not p["rgb"].exists():
            raise FrameError(frame, "exchange", InvalidArgumentError(f"oracle needs ground truth at {p['rgb']}"))
        oracle_respond(
            rec, read_rgb(p["rgb"]), read_pfm(p["depth"]),
            cfg.ff_scale, cfg.ff_shift, cfg.ff_noise, cfg.seed + frame,
        )
    out = await_completion(rec, cfg.exchange_timeout, cfg.poll_interval)
    timer.add("exchange", time.perf_counter() - t0)
    return out


def _lift(cfg: PipelineConfig, frame: int, cam: Camera, timer: _Timer):
    rgb, depth, fg, bg = _stage(frame, "load", timer, _load_source, cfg, frame)
    rgb, depth, fg = _stage(frame, "preprocess", timer, _preprocess, cfg, rgb, depth, fg)
    pc = _stage(frame, "lift", timer, lift_point_cloud, rgb, depth, cam)
    mesh_raw = _stage(frame, "lift", timer, lift_lattice_mesh, rgb, depth, cam)
    mesh_free = _stage(
        frame, "lift", timer, lift_lattice_mesh, rgb, depth, cam,
        max_depth_ratio=cfg.curtain_free_ratio,
    )
    return (rgb, depth, fg, bg, mesh_raw, pc), mesh_free


def _frame_list(cfg: PipelineConfig, lookup) -> list[int]:
    available = sorted(f for (v, f) in lookup if v == cfg.source_view)
    if not available:
        raise InvalidArgumentError(f"view {cfg.source_view!r} has no frames in the manifest")
    frames = list(cfg.frames) if cfg.frames is not None else available
    for f in frames:
        for view in (cfg.source_view, cfg.target_view):
            if (view, f) not in lookup:
                raise InvalidArgumentError(f"no camera for view {view!r} frame {f}")
    return frames


def _clear_asset_dir(d: Path) -> None:
    # only files this module writes are removed
    for p in list(d.glob("layer_*.ply")) + [d / "asset.json"]:
        if p.exists():
            p.unlink()


def run_expand(cfg: PipelineConfig) -> SceneAsset:
    """Run one source-to-target expansion step and write the asset and ``run.json``."""
    t_start = time.perf_counter()
    cfg.check_paths()
    timer = _Timer()
    lookup = manifest_lookup(load_manifest(Path(cfg.data_dir) / "cameras.json"))
    frames = _frame_list(cfg, lookup)
    src_cams = {f: lookup[(cfg.source_view, f)].camera for f in frames}
    tgt_cams = {f: lookup[(cfg.target_view, f)].camera for f in frames}

    with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
        lifted = list(pool.map(lambda f: _lift(cfg, f, src_cams[f], timer), frames))
    asset0 = initial_asset(
        ((f, mesh_free, geo[5]) for f, (geo, mesh_free) in zip(frames, lifted)), cfg.source_view
    )
    with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
        works = list(
            pool.map(
                lambda item: _prepare(
                    cfg, item[0], (src_cams[item[0]], tgt_cams[item[0]]), asset0, item[1][0], timer
                ),
                zip(frames, lifted),
            )
        )

    inputs = []
    for w in works:
        valid = w.anchor.valid & ~w.raw_union & w.d_ff.valid
        inputs.append(AnchorInput(w.d_ff, w.anchor, BitMask(valid)))
    report = RefineReport()
    t0 = time.perf_counter()
    try:
        refined = refine_sequence(inputs, cfg.refine, report)
    except Stitch4DError as exc:
        raise FrameError(frames[0], "refine", exc) from exc
    t_refine = time.perf_counter() - t0
    timer.add("refine", t_refine)

    def finish(i: int):
        w = works[i]
        apply = BitMask(w.masks.curtain_disc.bits | w.masks.curtain_fb.bits)
        d = _stage(
            w.frame, "curtain_bound", timer, curtain_lower_bound, refined[i], w.d_curtain, apply,
            cfg.curtain_min_component, cfg.curtain_smooth_sigma or None,
        )
        write_pfm(Path(cfg.work_dir) / "stages" / f"f{w.frame:04d}" / "refined_depth.pfm", d)
        info = w.masks.info_addition.bits
        usable = BitMask(info & d.valid)
        cand = _stage(w.frame, "candidates", timer, build_stitch_candidates, w.completed, d, usable, w.tgt_cam, w.frame)
        kept = _stage(
            w.frame, "filter", timer, render_disagreement_filter, cand, asset0, [w.src_cam],
            cfg.width, cfg.height, cfg.depth_tol, cfg.vote_frac,
        )
        stats = {
            "frame": w.frame,
            "masks": w.masks.stats(),
            "anchor_pixels": int(inputs[i].valid.count()),
            "info_without_depth": int((info & ~d.valid).sum()),
            "candidates": len(cand.points),
            "kept": len(kept.points),
            "removed": len(cand.points) - len(kept.points),
        }
        return kept, stats

    with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
        finished = list(pool.map(finish, range(len(works))))

    asset = asset0
    t0 = time.perf_counter()
    for kept, _ in finished:
        if len(kept.points):
            asset = merge_asset(asset, kept, cfg.source_view, cfg.target_view, step=1)
    cameras = {
        f"{view}:{f:04d}": lookup[(view, f)].to_json()
        for f in frames
        for view in sorted({cfg.source_view, cfg.target_view})
    }
    asset_dir = Path(cfg.out_dir) / "asset"
    asset_dir.mkdir(parents=True, exist_ok=True)
    _clear_asset_dir(asset_dir)
    asset.save(asset_dir, cameras)
    timer.add("merge", time.perf_counter() - t0)

    timings = {k: round(v, 6) for k, v in sorted(timer.totals.items())}
    timings["refine_seconds_per_frame"] = round(t_refine / len(frames), 6)
    timings["total"] = round(time.perf_counter() - t_start, 6)
    summary = {
        "config": cfg.summary(),
        "frames": [s for _, s in finished],
        "refine": {"levels": report.levels, "fallback_filled": report.filled_fallback},
        "layers": len(asset.layers),
        "timings": timings,
    }
    atomic_write_text(Path(cfg.out_dir) / "run.json", json.dumps(summary, indent=1, sort_keys=True) + "\n")
    return asset
