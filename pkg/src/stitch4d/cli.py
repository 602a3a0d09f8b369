"""Command-line entry point: ``stitch4d gen|preprocess|expand|render|refine|eval``."""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from .addmask import MaskBundle
from .camera import load_manifest, manifest_lookup
from .errors import Stitch4DError
from .frames import BitMask
from .io import atomic_write_text, parse_config, read_config, read_mask, read_pfm, read_rgb, write_mask, write_pfm, write_rgb
from .pipeline.config import PipelineConfig
from .preprocess import depth_spikefix, edge_mapping, occlusion_mask_refine
from .refine import AnchorInput, RefineConfig, RefineReport, refine_depth


def _overrides(pairs) -> dict:
    if not pairs:
        return {}
    return parse_config("\n".join(pairs))


def cmd_gen(args) -> int:
    from .pipeline.synthetic import gen_synthetic_scene

    spec = gen_synthetic_scene(Path(args.scene).read_text(), args.out)
    print(f"wrote {len(spec.cameras)} view(s) x {spec.n_frames} frame(s) at {spec.width}x{spec.height} to {args.out}")
    return 0


def cmd_preprocess(args) -> int:
    out = Path(args.out)
    depth = read_pfm(args.depth)
    counts = {}
    if args.op == "spikefix":
        region = read_mask(args.mask) if args.mask else None
        fixed = depth_spikefix(depth, region, window=args.window, mad_k=args.mad_k)
        counts["depth_changed"] = int(np.sum(fixed.data != depth.data))
        write_pfm(out / "depth.pfm", fixed)
    elif args.op == "edgemap":
        if not args.rgb:
            raise SystemExit("edgemap needs --rgb")
        rgb = read_rgb(args.rgb)
        rgb2, depth2 = edge_mapping(rgb, depth, radius=args.radius)
        counts["depth_changed"] = int(np.sum(depth2.data != depth.data))
        counts["rgb_changed"] = int(np.any(rgb2.data != rgb.data, axis=-1).sum())
        write_pfm(out / "depth.pfm", depth2)
        write_rgb(out / "rgb.png", rgb2)
    else:
        if not args.mask:
            raise SystemExit("maskrefine needs --mask")
        mask = read_mask(args.mask)
        refined = occlusion_mask_refine(mask, depth, window=args.window)
        counts["mask_changed"] = int(np.sum(refined.bits != mask.bits))
        write_mask(out / "mask.png", refined)
    for k, v in counts.items():
        print(f"{k}: {v}")
    return 0


def _report_masks(cfg: PipelineConfig, out_dir: Path) -> list[Path]:
    from .plotting import mask_montage

    paths = []
    for sd in sorted((Path(cfg.work_dir) / "stages").glob("f*")):
        frame = int(sd.name[1:])
        masks = MaskBundle(*(read_mask(sd / f"{k}.png") for k in ("hole", "curtain_disc", "curtain_fb", "info_addition")))
        proj = Path(cfg.work_dir) / "exchange" / cfg.target_view / f"{frame:04d}" / "projected.png"
        rgb = read_rgb(proj) if proj.exists() else None
        paths.append(mask_montage(masks, out_dir / f"masks_f{frame:04d}.png", rgb, f"{cfg.target_view} frame {frame}"))
    return paths


def cmd_expand(args) -> int:
    from .pipeline.expand import run_expand

    cfg = PipelineConfig.from_file(args.config, _overrides(args.set))
    asset = run_expand(cfg)
    run = json.loads((Path(cfg.out_dir) / "run.json").read_text())
    added = sum(f["kept"] for f in run["frames"])
    print(f"asset: {len(asset.layers)} layer(s), {added} stitched point(s) -> {Path(cfg.out_dir) / 'asset'}")
    print(f"refine: {run['timings']['refine_seconds_per_frame']:.3f} s/frame")
    if args.report:
        for p in _report_masks(cfg, Path(cfg.out_dir) / "report"):
            print(f"figure: {p}")
    return 0


def cmd_render(args) -> int:
    from .pipeline.novel_views import render_novel_views
    from .stitch import SceneAsset

    asset = SceneAsset.load(args.asset)
    lookup = manifest_lookup(load_manifest(args.manifest))
    try:
        r0 = lookup[(args.view0, args.frame)]
        r1 = lookup[(args.view1, args.frame)]
    except KeyError as exc:
        raise SystemExit(f"camera not found in manifest: {exc}") from None
    times = [args.frame] * args.n
    render_novel_views(asset, r0.camera, r1.camera, args.n, r0.width, r0.height, args.out, times)
    print(f"wrote {args.n} frame(s) to {args.out}")
    return 0


def cmd_refine(args) -> int:
    values = read_config(args.config) if args.config else {}
    values.update(_overrides(args.set))
    cfg = RefineConfig(**{k.removeprefix("refine."): v for k, v in values.items()})
    d_ff = read_pfm(args.dff)
    anchor = read_pfm(args.anchor)
    valid = anchor.valid & d_ff.valid
    if args.valid:
        valid &= read_mask(args.valid).bits
    report = RefineReport()
    t0 = time.perf_counter()
    out = refine_depth(AnchorInput(d_ff, anchor, BitMask(valid)), cfg, report)
    dt = time.perf_counter() - t0
    write_pfm(args.out, out)
    print(f"refined {int(out.valid.sum())} pixel(s) in {dt:.3f} s")
    if args.diag:
        doc = {"levels": report.levels, "objective": report.objective, "seconds": dt}
        atomic_write_text(args.diag, json.dumps(doc, indent=1, sort_keys=True) + "\n")
    return 0


def _trajectory(path, view):
    recs = load_manifest(path)
    if view is not None:
        recs = [r for r in recs if r.view_id == view]
    return {(r.view_id, r.frame_idx): r.camera for r in recs}


def cmd_eval(args) -> int:
    from .trajeval import compute_metrics, metrics_json, umeyama_sim3

    pred = _trajectory(args.pred, args.view)
    ref = _trajectory(args.ref, args.view)
    keys = sorted(set(pred) & set(ref), key=lambda k: (k[1], k[0]))
    if len(keys) < 3:
        raise SystemExit("need at least 3 poses present in both manifests")
    P = [pred[k] for k in keys]
    R = [ref[k] for k in keys]
    m = compute_metrics(P, R)
    text = metrics_json(m)
    if args.out:
        atomic_write_text(args.out, text)
    print(text, end="")
    if args.plot:
        from .plotting import plot_trajectory

        cp = np.array([c.center for c in P])
        cr = np.array([c.center for c in R])
        T = umeyama_sim3(cp, cr)
        print(f"figure: {plot_trajectory(T.apply(cp), cr, args.plot)}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="stitch4d", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="ray-cast a synthetic scene description to disk")
    g.add_argument("scene")
    g.add_argument("out")
    g.set_defaults(func=cmd_gen)

    pp = sub.add_parser("preprocess", help="run one preprocessing operator and print change counts")
    pp.add_argument("op", choices=["spikefix", "edgemap", "maskrefine"])
    pp.add_argument("--depth", required=True)
    pp.add_argument("--rgb")
    pp.add_argument("--mask")
    pp.add_argument("--out", required=True, help="output directory")
    pp.add_argument("--window", type=int, default=7)
    pp.add_argument("--mad-k", type=float, default=3.0)
    pp.add_argument("--radius", type=int, default=3)
    pp.set_defaults(func=cmd_preprocess)

    e = sub.add_parser("expand", help="run one source-to-target expansion step")
    e.add_argument("--config", required=True)
    e.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    e.add_argument("--report", action="store_true", help="also render mask montages to <out_dir>/report")
    e.set_defaults(func=cmd_expand)

    r = sub.add_parser("render", help="render an asset along an interpolated camera path")
    r.add_argument("--asset", required=True)
    r.add_argument("--manifest", required=True)
    r.add_argument("--view0", required=True)
    r.add_argument("--view1", required=True)
    r.add_argument("--frame", type=int, default=0)
    r.add_argument("--n", type=int, default=10)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_render)

    f = sub.add_parser("refine", help="refine a feed-forward depth map against an anchor depth")
    f.add_argument("--dff", required=True)
    f.add_argument("--anchor", required=True)
    f.add_argument("--valid")
    f.add_argument("--out", required=True)
    f.add_argument("--config")
    f.add_argument("--set", action="append", metavar="KEY=VALUE")
    f.add_argument("--diag", help="write per-level diagnostics JSON here")
    f.set_defaults(func=cmd_refine)

    v = sub.add_parser("eval", help="trajectory metrics between two camera manifests")
    v.add_argument("--pred", required=True)
    v.add_argument("--ref", required=True)
    v.add_argument("--view")
    v.add_argument("--out")
    v.add_argument("--plot", help="write a trajectory figure here")
    v.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (Stitch4DError, OSError) as exc:
        print(f"stitch4d {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
