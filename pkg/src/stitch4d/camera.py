"""Pinhole camera model, point (un)projection and pose interpolation.

Cameras store world-to-camera extrinsics: a world point ``X`` maps to camera
coordinates ``R @ X + tau``.  Pixel ``(u, v)`` denotes the pixel *center* at
column ``u`` and row ``v`` (0-based), and the homogeneous pixel is
``[u, v, 1]``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import DegenerateProjectionError, InvalidArgumentError

ORTHO_TOL = 1e-9
QUAT_INPUT_TOL = 1e-6
PROJECT_EPS = 1e-12


def _as_rotation(R) -> np.ndarray:
    R = np.array(R, dtype=np.float64).reshape(3, 3)
    if not np.all(np.isfinite(R)):
        raise InvalidArgumentError("rotation contains non-finite entries")
    return R


@dataclass(frozen=True, eq=False)
class Camera:
    """Zero-skew pinhole camera with world-to-camera pose."""

    fx: float
    fy: float
    cx: float
    cy: float
    R: np.ndarray = field(default_factory=lambda: np.eye(3))
    tau: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = _as_rotation(self.R)
        tau = np.array(self.tau, dtype=np.float64).reshape(3)
        if not (self.fx > 0 and self.fy > 0):
            raise InvalidArgumentError(f"focal lengths must be positive, got {self.fx}, {self.fy}")
        if not np.all(np.isfinite(tau)):
            raise InvalidArgumentError("translation contains non-finite entries")
        if np.abs(R.T @ R - np.eye(3)).max() > ORTHO_TOL or abs(np.linalg.det(R) - 1.0) > ORTHO_TOL:
            raise InvalidArgumentError("R is not a rotation matrix within 1e-9")
        R.setflags(write=False)
        tau.setflags(write=False)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "tau", tau)
        for name in ("fx", "fy", "cx", "cy"):
            object.__setattr__(self, name, float(getattr(self, name)))

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates, ``-R^T tau``."""
        return -self.R.T @ self.tau

    @classmethod
    def from_center(cls, fx, fy, cx, cy, R, center) -> "Camera":
        R = _as_rotation(R)
        return cls(fx, fy, cx, cy, R, -R @ np.asarray(center, dtype=np.float64))

    def with_pose(self, R, tau) -> "Camera":
        return Camera(self.fx, self.fy, self.cx, self.cy, R, tau)

    def same_as(self, other: "Camera") -> bool:
        return (
            (self.fx, self.fy, self.cx, self.cy) == (other.fx, other.fy, other.cx, other.cy)
            and np.array_equal(self.R, other.R)
            and np.array_equal(self.tau, other.tau)
        )

    def __repr__(self):
        return (
            f"Camera(fx={self.fx:g}, fy={self.fy:g}, cx={self.cx:g}, cy={self.cy:g}, "
            f"center={np.round(self.center, 6).tolist()})"
        )


@dataclass(frozen=True)
class Quaternion:
    w: float
    x: float
    y: float
    z: float

    def as_array(self) -> np.ndarray:
        return np.array([self.w, self.x, self.y, self.z])

    def normalized(self) -> "Quaternion":
        q = self.as_array()
        n = np.linalg.norm(q)
        if not np.isfinite(n) or n == 0.0:
            raise InvalidArgumentError("cannot normalize a zero or non-finite quaternion")
        return Quaternion(*(q / n))


@dataclass(frozen=True)
class PixelCoord:
    u: float
    v: float


def _check_depth(d: float) -> None:
    if not np.isfinite(d) or d <= 0:
        raise InvalidArgumentError(f"depth must be finite and positive, got {d}")


def unproject(cam: Camera, p, d: float) -> np.ndarray:
    """World point seen at pixel ``p`` with camera-space depth ``d``."""
    _check_depth(d)
    u, v = (p.u, p.v) if isinstance(p, PixelCoord) else p
    ray = np.array([(u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, 1.0])
    return cam.R.T @ (d * ray - cam.tau)


def project(cam: Camera, X) -> tuple[PixelCoord, float, bool]:
    """Project a world point; returns ``(pixel, depth, behind_camera)``.

    Raises DegenerateProjectionError when the homogeneous z is ~0.
    """
    X = np.asarray(X, dtype=np.float64)
    if not np.all(np.isfinite(X)):
        raise InvalidArgumentError("point must be finite")
    Xc = cam.R @ X + cam.tau
    z = Xc[2]
    if abs(z) < PROJECT_EPS:
        raise DegenerateProjectionError(f"point projects with |z|={abs(z):.3g}")
    u = cam.fx * Xc[0] / z + cam.cx
    v = cam.fy * Xc[1] / z + cam.cy
    return PixelCoord(u, v), float(z), bool(z <= 0)


def unproject_pixels(cam: Camera, u, v, d) -> np.ndarray:
    """Vectorised unprojection; ``u, v, d`` broadcast, result has a trailing axis of 3."""
    u, v, d = np.broadcast_arrays(np.asarray(u, float), np.asarray(v, float), np.asarray(d, float))
    rays = np.stack([(u - cam.cx) / cam.fx * d, (v - cam.cy) / cam.fy * d, d], axis=-1)
    return (rays - cam.tau) @ cam.R


def project_points(cam: Camera, X) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorised projection of ``(..., 3)`` points to ``(u, v, z)``.

    Points with ``|z| < 1e-12`` get NaN pixel coordinates instead of raising.
    """
    Xc = np.asarray(X, dtype=np.float64) @ cam.R.T + cam.tau
    z = Xc[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        ok = np.abs(z) >= PROJECT_EPS
        zs = np.where(ok, z, np.nan)
        u = cam.fx * Xc[..., 0] / zs + cam.cx
        v = cam.fy * Xc[..., 1] / zs + cam.cy
    return u, v, z


def rotation_to_quaternion(R) -> Quaternion:
    R = _as_rotation(R)
    if np.abs(R.T @ R - np.eye(3)).max() > QUAT_INPUT_TOL or abs(np.linalg.det(R) - 1.0) > QUAT_INPUT_TOL:
        raise InvalidArgumentError("matrix is not orthonormal within 1e-6")
    x, y, z, w = Rotation.from_matrix(R).as_quat()
    q = Quaternion(w, x, y, z)
    return q if w >= 0 else Quaternion(-w, -x, -y, -z)


def quaternion_to_rotation(q: Quaternion) -> np.ndarray:
    q = q.normalized()
    return Rotation.from_quat([q.x, q.y, q.z, q.w]).as_matrix()


def slerp(q0: Quaternion, q1: Quaternion, a: float) -> Quaternion:
    """Spherical interpolation along the shorter arc."""
    p0 = q0.normalized().as_array()
    p1 = q1.normalized().as_array()
    dot = float(p0 @ p1)
    if dot < 0.0:
        p1, dot = -p1, -dot
    dot = min(dot, 1.0)
    theta = np.arccos(dot)
    if theta < 1e-10:
        out = (1.0 - a) * p0 + a * p1
    else:
        out = (np.sin((1.0 - a) * theta) * p0 + np.sin(a * theta) * p1) / np.sin(theta)
    return Quaternion(*(out / np.linalg.norm(out)))


def interpolate_pose(cam0: Camera, cam1: Camera, a: float) -> Camera:
    """Interpolate rotation by SLERP and the camera center linearly.

    Intrinsics come from ``cam0``.  The endpoints return the input poses
    exactly.
    """
    if a == 0:
        return cam0.with_pose(cam0.R, cam0.tau)
    if a == 1:
        return cam0.with_pose(cam1.R, cam1.tau)
    q = slerp(rotation_to_quaternion(cam0.R), rotation_to_quaternion(cam1.R), a)
    R = quaternion_to_rotation(q)
    center = (1.0 - a) * cam0.center + a * cam1.center
    return cam0.with_pose(R, -R @ center)


def geodesic_angle(R0, R1) -> float:
    """Angle in radians of the relative rotation ``R0^T R1``."""
    Rr = np.asarray(R0).T @ np.asarray(R1)
    return _rotation_angle(Rr)


def _rotation_angle(R) -> float:
    # atan2 form keeps precision near 0 and pi, unlike arccos((tr-1)/2)
    v = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    return float(np.arctan2(0.5 * np.linalg.norm(v), 0.5 * (np.trace(R) - 1.0)))


# ---------------------------------------------------------------------------
# Camera manifest (JSON array of per-(view, frame) records)
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class CameraRecord:
    view_id: str
    frame_idx: int
    camera: Camera
    width: int
    height: int

    def to_json(self) -> dict:
        c = self.camera
        return {
            "view_id": self.view_id,
            "frame_idx": int(self.frame_idx),
            "fx": c.fx,
            "fy": c.fy,
            "cx": c.cx,
            "cy": c.cy,
            "R": [float(x) for x in c.R.reshape(-1)],
            "tau": [float(x) for x in c.tau],
            "width": int(self.width),
            "height": int(self.height),
        }

    @classmethod
    def from_json(cls, d: dict) -> "CameraRecord":
        missing = {"view_id", "frame_idx", "fx", "fy", "cx", "cy", "R", "tau", "width", "height"} - set(d)
        if missing:
            raise InvalidArgumentError(f"camera record missing keys: {sorted(missing)}")
        R = np.asarray(d["R"], dtype=np.float64)
        if R.size != 9 or len(d["tau"]) != 3:
            raise InvalidArgumentError("R must have 9 entries and tau 3")
        cam = Camera(d["fx"], d["fy"], d["cx"], d["cy"], R.reshape(3, 3), d["tau"])
        return cls(str(d["view_id"]), int(d["frame_idx"]), cam, int(d["width"]), int(d["height"]))


def load_manifest(path) -> list[CameraRecord]:
    with open(path) as f:
        data = json.load(f)
    if not isinstance(data, list):
        raise InvalidArgumentError("camera manifest must be a JSON array")
    return [CameraRecord.from_json(d) for d in data]


def save_manifest(path, records: Iterable[CameraRecord]) -> None:
    from .io import atomic_write_text

    atomic_write_text(Path(path), json.dumps([r.to_json() for r in records], indent=1) + "\n")


def manifest_lookup(records: Iterable[CameraRecord]) -> dict[tuple[str, int], CameraRecord]:
    return {(r.view_id, r.frame_idx): r for r in records}
