"""Sim3 trajectory alignment and camera-motion error metrics."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .camera import Camera, _rotation_angle
from .errors import DegenerateInputError, InvalidArgumentError


@dataclass(frozen=True, eq=False)
class Sim3Transform:
    """Similarity ``x -> s * R @ x + t``."""

    s: float
    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        R = np.array(self.R, dtype=np.float64).reshape(3, 3)
        if not self.s > 0:
            raise InvalidArgumentError("scale must be positive")
        if np.abs(R.T @ R - np.eye(3)).max() > 1e-9 or abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise InvalidArgumentError("R is not a rotation within 1e-9")
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", np.array(self.t, dtype=np.float64).reshape(3))
        object.__setattr__(self, "s", float(self.s))

    def apply(self, X) -> np.ndarray:
        return self.s * np.asarray(X, dtype=np.float64) @ self.R.T + self.t

    def apply_camera(self, cam: Camera) -> Camera:
        """Camera seeing the transformed world exactly as ``cam`` saw the original."""
        R = cam.R @ self.R.T
        center = self.apply(cam.center)
        return cam.with_pose(R, -R @ center)


def umeyama_sim3(src, dst) -> Sim3Transform:
    """Closed-form least-squares similarity mapping ``src`` onto ``dst``."""
    X = np.asarray(src, dtype=np.float64).reshape(-1, 3)
    Y = np.asarray(dst, dtype=np.float64).reshape(-1, 3)
    if len(X) != len(Y):
        raise InvalidArgumentError("src and dst lengths differ")
    if len(X) < 3:
        raise DegenerateInputError("at least 3 correspondences are required")
    mx, my = X.mean(0), Y.mean(0)
    Xc, Yc = X - mx, Y - my
    var_x = float(np.mean(np.sum(Xc**2, axis=1)))
    if var_x <= 1e-300:
        raise DegenerateInputError("source points are coincident")
    cov = Yc.T @ Xc / len(X)
    U, D, Vt = np.linalg.svd(cov)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    s = float(np.sum(D * np.diag(S)) / var_x)
    if not s > 0:
        raise DegenerateInputError("alignment produced a non-positive scale")
    t = my - s * R @ mx
    # re-orthonormalize to absorb rounding before the strict type check
    u2, _, vt2 = np.linalg.svd(R)
    R = u2 @ vt2
    return Sim3Transform(s, R, t)


@dataclass(frozen=True)
class TrajectoryMetrics:
    ate_mean: float
    ate_rmse: float
    rot_mean_deg: float
    rpe_trans_mean: float
    align_scale: float

    def to_json(self) -> dict:
        d = asdict(self)
        return {
            "ATE Mean": d["ate_mean"],
            "ATE RMSE": d["ate_rmse"],
            "Rot Mean (Deg)": d["rot_mean_deg"],
            "RPE Trans Mean": d["rpe_trans_mean"],
            "Align Scale": d["align_scale"],
        }


def compute_metrics(pred: Sequence[Camera], ref: Sequence[Camera]) -> TrajectoryMetrics:
    """Align predicted camera centers to the reference with Sim3 and score the result.

    ATE is computed on aligned centers.  Rotation error is the geodesic angle
    between ``R_align``-corrected predicted and reference camera orientations.
    RPE uses consecutive aligned center displacements.

    When the reference centers are collinear the alignment rotation about
    that line is not determined by the centers, so the rotation error is
    only meaningful for trajectories that span a plane or more.
    """
    if len(pred) != len(ref):
        raise InvalidArgumentError("trajectories differ in length")
    if len(pred) < 3:
        raise DegenerateInputError("at least 3 poses are required")
    cp = np.array([c.center for c in pred])
    cr = np.array([c.center for c in ref])
    T = umeyama_sim3(cp, cr)
    ca = T.apply(cp)
    err = np.linalg.norm(ca - cr, axis=1)
    ate_mean = float(err.mean())
    ate_rmse = float(np.sqrt(np.mean(err**2)))
    # world-to-camera rotations after alignment: R_pred @ R_align^T
    angles = [_rotation_angle(r.R @ (p.R @ T.R.T).T) for p, r in zip(pred, ref)]
    rot = float(np.degrees(np.mean(angles)))
    rpe = float(np.mean(np.linalg.norm(np.diff(ca, axis=0) - np.diff(cr, axis=0), axis=1)))
    return TrajectoryMetrics(ate_mean, max(ate_rmse, ate_mean), rot, rpe, T.s)


def metrics_json(m: TrajectoryMetrics) -> str:
    return json.dumps(m.to_json(), indent=1, sort_keys=True) + "\n"
