"""Ray-cast synthetic RGB-D scenes described in a small plain-text format.

Example::

    resolution 96 64
    intrinsics 80 80 47.5 31.5      # optional; default fx = fy = width
    frames 2
    plane point=0,0,4 normal=0,0,-1 color=90,140,200
    rect center=0,0,2 size=0.5,0.5 color=220,60,40 fg velocity=0.05,0,0
    box center=1,0,3 size=0.4,0.4,0.4 color=40,200,80
    camera view=src center=0,0,0 yaw=0 pitch=0 roll=0
    camera view=tgt center=0.3,0,0 yaw=-4
    interp view=mid from=src to=tgt a=0.5

Angles are in degrees.  ``rect`` is axis-aligned and parallel to the image
plane of an unrotated camera.  Primitives flagged ``fg`` form the foreground
mask; background layers are rendered without them.  ``velocity`` moves a
primitive per frame.  Every camera gets RGB, depth, foreground mask and
background RGB-D outputs for every frame.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from ..camera import Camera, CameraRecord, interpolate_pose, save_manifest
from ..errors import SceneParseError
from ..frames import BitMask, DepthFrame, RgbFrame
from ..io import write_mask, write_pfm, write_rgb

HIT_EPS = 1e-9


@dataclass
class Primitive:
    kind: str
    params: dict
    color: tuple[int, int, int]
    fg: bool = False
    velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def at_frame(self, t: int) -> "Primitive":
        shift = self.velocity * t
        p = dict(self.params)
        key = "point" if self.kind == "plane" else "center"
        p[key] = np.asarray(p[key]) + shift
        return Primitive(self.kind, p, self.color, self.fg, self.velocity)

    def intersect(self, C: np.ndarray, D: np.ndarray) -> np.ndarray:
        """Ray parameter of the first hit (inf when missed); rays ``C + t * D``."""
        with np.errstate(divide="ignore", invalid="ignore"):
            if self.kind == "plane":
                n = np.asarray(self.params["normal"], float)
                denom = D @ n
                t = ((np.asarray(self.params["point"]) - C) @ n) / denom
                return np.where(np.abs(denom) > HIT_EPS, t, np.inf)
            c = np.asarray(self.params["center"], float)
            if self.kind == "rect":
                sx, sy = self.params["size"]
                t = (c[2] - C[2]) / D[:, 2]
                X = C + t[:, None] * D
                inside = (np.abs(X[:, 0] - c[0]) <= sx / 2) & (np.abs(X[:, 1] - c[1]) <= sy / 2)
                return np.where(inside & (np.abs(D[:, 2]) > HIT_EPS), t, np.inf)
            # box, slab method
            half = np.asarray(self.params["size"], float) / 2
            lo = (c - half - C) / D
            hi = (c + half - C) / D
            tmin = np.nanmax(np.minimum(lo, hi), axis=1)
            tmax = np.nanmin(np.maximum(lo, hi), axis=1)
            t = np.where(tmin > 0, tmin, tmax)
            return np.where(tmax >= np.maximum(tmin, 0), t, np.inf)


@dataclass
class SceneSpec:
    width: int
    height: int
    intrinsics: tuple[float, float, float, float]
    n_frames: int
    primitives: list[Primitive]
    cameras: dict[str, Camera]

    def camera(self, view: str) -> Camera:
        return self.cameras[view]


def _vec(text: str, n: int, lineno: int, name: str) -> np.ndarray:
    try:
        vals = [float(x) for x in text.split(",")]
    except ValueError:
        raise SceneParseError(lineno, f"{name}: expected {n} comma-separated numbers") from None
    if len(vals) != n:
        raise SceneParseError(lineno, f"{name}: expected {n} values, got {len(vals)}")
    return np.array(vals)


def _kv(tokens, lineno):
    out, flags = {}, set()
    for tok in tokens:
        if "=" in tok:
            k, v = tok.split("=", 1)
            out[k] = v
        else:
            flags.add(tok)
    return out, flags


def _color(kv, lineno) -> tuple[int, int, int]:
    if "color" not in kv:
        raise SceneParseError(lineno, "missing color=")
    c = _vec(kv["color"], 3, lineno, "color")
    if np.any(c < 0) or np.any(c > 255):
        raise SceneParseError(lineno, "color components must lie in [0, 255]")
    return tuple(int(x) for x in c)


def camera_rotation(yaw: float, pitch: float, roll: float) -> np.ndarray:
    """World-to-camera rotation for a camera turned by yaw (about Y), pitch (X), roll (Z)."""
    cam_to_world = Rotation.from_euler("YXZ", [yaw, pitch, roll], degrees=True).as_matrix()
    return cam_to_world.T


def parse_scene(text: str) -> SceneSpec:
    width = height = None
    intr = None
    n_frames = 1
    prims: list[Primitive] = []
    cams: dict[str, Camera] = {}
    pending_cams = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        head, *rest = line.split()
        try:
            if head == "resolution":
                if len(rest) != 2:
                    raise SceneParseError(lineno, "resolution needs width and height")
                width, height = int(rest[0]), int(rest[1])
                if width <= 0 or height <= 0:
                    raise SceneParseError(lineno, "resolution must be positive")
            elif head == "intrinsics":
                if len(rest) != 4:
                    raise SceneParseError(lineno, "intrinsics needs fx fy cx cy")
                intr = tuple(float(x) for x in rest)
            elif head == "frames":
                n_frames = int(rest[0])
                if n_frames < 1:
                    raise SceneParseError(lineno, "frames must be >= 1")
            elif head in ("plane", "rect", "box"):
                kv, flags = _kv(rest, lineno)
                if head == "plane":
                    params = {"point": _vec(kv.get("point", ""), 3, lineno, "point"),
                              "normal": _vec(kv.get("normal", "0,0,-1"), 3, lineno, "normal")}
                    if np.linalg.norm(params["normal"]) == 0:
                        raise SceneParseError(lineno, "plane normal must be nonzero")
                elif head == "rect":
                    params = {"center": _vec(kv.get("center", ""), 3, lineno, "center"),
                              "size": _vec(kv.get("size", ""), 2, lineno, "size")}
                else:
                    params = {"center": _vec(kv.get("center", ""), 3, lineno, "center"),
                              "size": _vec(kv.get("size", ""), 3, lineno, "size")}
                vel = _vec(kv["velocity"], 3, lineno, "velocity") if "velocity" in kv else np.zeros(3)
                unknown = flags - {"fg"}
                if unknown:
                    raise SceneParseError(lineno, f"unknown flag(s) {sorted(unknown)}")
                prims.append(Primitive(head, params, _color(kv, lineno), "fg" in flags, vel))
            elif head == "camera":
                kv, _ = _kv(rest, lineno)
                if "view" not in kv:
                    raise SceneParseError(lineno, "camera needs view=")
                center = _vec(kv.get("center", "0,0,0"), 3, lineno, "center")
                ang = [float(kv.get(k, 0.0)) for k in ("yaw", "pitch", "roll")]
                pending_cams.append((lineno, "camera", kv["view"], center, ang))
            elif head == "interp":
                kv, _ = _kv(rest, lineno)
                for key in ("view", "from", "to", "a"):
                    if key not in kv:
                        raise SceneParseError(lineno, f"interp needs {key}=")
                pending_cams.append((lineno, "interp", kv["view"], (kv["from"], kv["to"]), float(kv["a"])))
            else:
                raise SceneParseError(lineno, f"unknown directive {head!r}")
        except SceneParseError:
            raise
        except (ValueError, IndexError) as exc:
            raise SceneParseError(lineno, str(exc)) from None
    if width is None:
        raise SceneParseError(0, "missing resolution")
    fx, fy, cx, cy = intr if intr else (float(width), float(width), (width - 1) / 2, (height - 1) / 2)
    for lineno, kind, view, a, b in pending_cams:
        if view in cams:
            raise SceneParseError(lineno, f"duplicate view {view!r}")
        if kind == "camera":
            cams[view] = Camera.from_center(fx, fy, cx, cy, camera_rotation(*b), a)
        else:
            src, dst = a
            if src not in cams or dst not in cams:
                raise SceneParseError(lineno, "interp refers to an undefined view")
            if not 0 <= b <= 1:
                raise SceneParseError(lineno, "interp a must lie in [0, 1]")
            cams[view] = interpolate_pose(cams[src], cams[dst], b)
    if not cams:
        raise SceneParseError(0, "no cameras defined")
    return SceneSpec(width, height, (fx, fy, cx, cy), n_frames, prims, cams)


def pixel_rays(cam: Camera, width: int, height: int) -> tuple[np.ndarray, np.ndarray]:
    """Camera center and world ray directions whose camera-space z component is 1."""
    v, u = np.mgrid[0:height, 0:width]
    dirs = np.stack([(u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, np.ones_like(u, float)], axis=-1)
    return cam.center, dirs.reshape(-1, 3) @ cam.R


def render_scene(spec: SceneSpec, cam: Camera, frame: int, include_fg: bool = True):
    """Exact ray-cast ``(rgb, depth, fg_mask)`` for one camera and frame."""
    C, D = pixel_rays(cam, spec.width, spec.height)
    n = len(D)
    best = np.full(n, np.inf)
    color = np.zeros((n, 3), np.uint8)
    fg = np.zeros(n, bool)
    for prim in spec.primitives:
        if prim.fg and not include_fg:
            continue
        t = prim.at_frame(frame).intersect(C, D)
        hit = (t > 1e-6) & (t < best)
        best[hit] = t[hit]
        color[hit] = prim.color
        fg[hit] = prim.fg
    shape = (spec.height, spec.width)
    ok = np.isfinite(best)
    depth = DepthFrame(np.where(ok, best, 0.0).reshape(shape).astype(np.float32), ok.reshape(shape))
    return RgbFrame(color.reshape(shape + (3,))), depth, BitMask(fg.reshape(shape))


def frame_paths(root, view: str, frame: int) -> dict[str, Path]:
    d = Path(root) / view
    return {
        "rgb": d / f"rgb_{frame:04d}.png",
        "depth": d / f"depth_{frame:04d}.pfm",
        "fg": d / f"fg_{frame:04d}.png",
        "bgrgb": d / f"bgrgb_{frame:04d}.png",
        "bgdepth": d / f"bgdepth_{frame:04d}.pfm",
    }


def gen_synthetic_scene(text: str, out_dir) -> SceneSpec:
    """Parse ``text`` and write every view/frame plus ``cameras.json`` to ``out_dir``."""
    spec = parse_scene(text)
    out = Path(out_dir)
    records = []
    for view, cam in spec.cameras.items():
        for t in range(spec.n_frames):
            rgb, depth, fg = render_scene(spec, cam, t)
            bg_rgb, bg_depth, _ = render_scene(spec, cam, t, include_fg=False)
            p = frame_paths(out, view, t)
            write_rgb(p["rgb"], rgb)
            write_pfm(p["depth"], depth)
            write_mask(p["fg"], fg)
            write_rgb(p["bgrgb"], bg_rgb)
            write_pfm(p["bgdepth"], bg_depth)
            records.append(CameraRecord(view, t, cam, spec.width, spec.height))
    save_manifest(out / "cameras.json", records)
    return spec
