"""On-disk formats: PFM depth, PNG images and masks, PLY geometry, key=value config.

Every writer goes through a write-temp-then-rename step so readers never
observe a partially written file.
"""

from __future__ import annotations

import io as _io
import os
import re
import tempfile
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import InvalidArgumentError
from .frames import BitMask, ColoredPointCloud, DepthFrame, LatticeMesh, RgbFrame


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


# ---------------------------------------------------------------------------
# PFM
# ---------------------------------------------------------------------------


def encode_pfm(depth: DepthFrame) -> bytes:
    """Single-channel little-endian PFM; invalid pixels are stored as 0."""
    data = np.where(depth.valid, depth.data, 0.0).astype("<f4")
    header = f"Pf\n{depth.width} {depth.height}\n-1.0\n".encode("ascii")
    # PFM stores rows bottom to top
    return header + np.ascontiguousarray(data[::-1]).tobytes()


def write_pfm(path, depth: DepthFrame) -> None:
    atomic_write_bytes(path, encode_pfm(depth))


def read_pfm(path, d_max: float = np.inf) -> DepthFrame:
    with open(path, "rb") as f:
        kind = f.readline().strip()
        if kind not in (b"Pf", b"PF"):
            raise InvalidArgumentError(f"{path}: not a PFM file")
        dims = f.readline().split()
        while not dims:
            dims = f.readline().split()
        w, h = int(dims[0]), int(dims[1])
        scale = float(f.readline().strip())
        dtype = "<f4" if scale < 0 else ">f4"
        ch = 3 if kind == b"PF" else 1
        arr = np.frombuffer(f.read(w * h * ch * 4), dtype=dtype)
    if arr.size != w * h * ch:
        raise InvalidArgumentError(f"{path}: truncated PFM data")
    arr = arr.reshape(h, w, ch)[::-1, :, 0].astype(np.float32)
    valid = np.isfinite(arr) & (arr > 0) & (arr <= d_max)
    return DepthFrame(np.ascontiguousarray(arr), valid, d_max=d_max)


# ---------------------------------------------------------------------------
# PNG
# ---------------------------------------------------------------------------


def _png_bytes(arr: np.ndarray) -> bytes:
    buf = _io.BytesIO()
    # fixed compression settings keep the encoding reproducible
    Image.fromarray(arr).save(buf, format="PNG", compress_level=6)
    return buf.getvalue()


def write_rgb(path, rgb: RgbFrame) -> None:
    atomic_write_bytes(path, _png_bytes(rgb.data))


def read_rgb(path) -> RgbFrame:
    with Image.open(path) as im:
        return RgbFrame(np.asarray(im.convert("RGB"), dtype=np.uint8).copy())


def write_mask(path, mask: BitMask) -> None:
    atomic_write_bytes(path, _png_bytes(np.where(mask.bits, 255, 0).astype(np.uint8)))


def read_mask(path) -> BitMask:
    with Image.open(path) as im:
        return BitMask(np.asarray(im.convert("L")) >= 128)


# ---------------------------------------------------------------------------
# PLY
# ---------------------------------------------------------------------------

_VERTEX = np.dtype(
    [("x", "<f8"), ("y", "<f8"), ("z", "<f8"), ("red", "u1"), ("green", "u1"), ("blue", "u1"), ("source_pixel", "<i4")]
)
_FACE = np.dtype([("n", "u1"), ("v", "<i4", (3,))])


def encode_ply(geom: ColoredPointCloud | LatticeMesh) -> bytes:
    """Binary little-endian PLY with double positions, uchar colors and the source pixel id."""
    is_mesh = isinstance(geom, LatticeMesh)
    pts = geom.vertices if is_mesh else geom.points
    lines = [
        "ply",
        "format binary_little_endian 1.0",
        f"element vertex {len(pts)}",
        "property double x",
        "property double y",
        "property double z",
        "property uchar red",
        "property uchar green",
        "property uchar blue",
        "property int source_pixel",
    ]
    if is_mesh:
        lines += [f"element face {geom.n_triangles}", "property list uchar int vertex_indices"]
    lines.append("end_header")
    v = np.zeros(len(pts), _VERTEX)
    v["x"], v["y"], v["z"] = pts[:, 0], pts[:, 1], pts[:, 2]
    v["red"], v["green"], v["blue"] = geom.colors[:, 0], geom.colors[:, 1], geom.colors[:, 2]
    v["source_pixel"] = geom.source_pixel
    body = v.tobytes()
    if is_mesh:
        f = np.zeros(geom.n_triangles, _FACE)
        f["n"] = 3
        f["v"] = geom.triangles
        body += f.tobytes()
    return ("\n".join(lines) + "\n").encode("ascii") + body


def write_ply(path, geom: ColoredPointCloud | LatticeMesh) -> None:
    atomic_write_bytes(path, encode_ply(geom))


def _ply_ascii(body: bytes, n_v: int, n_f: int | None):
    rows = body.decode("ascii").splitlines()
    if n_v:
        vt = np.array([r.split() for r in rows[:n_v]], dtype=object)
        pts = vt[:, :3].astype(np.float64)
        cols = vt[:, 3:6].astype(np.int64).astype(np.uint8)
        sp = vt[:, 6].astype(np.int64)
    else:
        pts, cols, sp = np.zeros((0, 3)), np.zeros((0, 3), np.uint8), np.zeros(0, np.int64)
    tris = None
    if n_f is not None:
        tris = np.array([r.split()[1:4] for r in rows[n_v : n_v + n_f]], dtype=np.int64).reshape(-1, 3)
    return pts, cols, sp, tris


def read_ply(path) -> ColoredPointCloud | LatticeMesh:
    """Read a PLY written by :func:`write_ply` (binary or ASCII variant)."""
    with open(path, "rb") as fh:
        data = fh.read()
    marker = b"end_header\n"
    cut = data.find(marker)
    if cut < 0:
        raise InvalidArgumentError(f"{path}: missing PLY header")
    header = data[:cut].decode("ascii")
    body = data[cut + len(marker):]
    n_v = int(re.search(r"element vertex (\d+)", header).group(1))
    m_f = re.search(r"element face (\d+)", header)
    n_f = int(m_f.group(1)) if m_f else None
    if "format ascii" in header:
        pts, cols, sp, tris = _ply_ascii(body, n_v, n_f)
    else:
        nbv = n_v * _VERTEX.itemsize
        nbf = (n_f or 0) * _FACE.itemsize
        if len(body) < nbv + nbf:
            raise InvalidArgumentError(f"{path}: truncated PLY data")
        v = np.frombuffer(body, _VERTEX, count=n_v)
        pts = np.stack([v["x"], v["y"], v["z"]], axis=1).astype(np.float64)
        cols = np.stack([v["red"], v["green"], v["blue"]], axis=1).astype(np.uint8)
        sp = v["source_pixel"].astype(np.int64)
        tris = None
        if n_f is not None:
            f = np.frombuffer(body, _FACE, count=n_f, offset=nbv)
            if np.any(f["n"] != 3):
                raise InvalidArgumentError(f"{path}: only triangle faces are supported")
            tris = f["v"].astype(np.int64).reshape(-1, 3)
    if tris is None:
        return ColoredPointCloud(pts, cols, sp)
    return LatticeMesh(pts, cols, sp, tris)


# ---------------------------------------------------------------------------
# key=value configuration
# ---------------------------------------------------------------------------


def parse_value(text: str):
    """Interpret a config value as int, float, bool, comma list, or string."""
    t = text.strip()
    if "," in t:
        return tuple(parse_value(p) for p in t.split(",") if p.strip())
    low = t.lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    if low in ("none", "null"):
        return None
    for conv in (int, float):
        try:
            return conv(t)
        except ValueError:
            pass
    return t


def parse_config(text: str) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidArgumentError(f"config line {lineno}: expected key = value")
        key, value = line.split("=", 1)
        key = key.strip()
        if not key:
            raise InvalidArgumentError(f"config line {lineno}: empty key")
        out[key] = parse_value(value)
    return out


def read_config(path) -> dict:
    with open(path) as f:
        return parse_config(f.read())
