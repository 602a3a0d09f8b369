import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import minimize
from scipy.spatial.transform import Rotation

from stitch4d.camera import Camera
from stitch4d.errors import DegenerateInputError, InvalidArgumentError
from stitch4d.trajeval import Sim3Transform, compute_metrics, metrics_json, umeyama_sim3


def _trajectory(rng, n=12):
    cams = []
    for k in range(n):
        R = Rotation.from_rotvec(rng.normal(scale=0.3, size=3)).as_matrix()
        c = np.array([np.cos(k / 3), np.sin(k / 2), 0.1 * k]) + 0.05 * rng.normal(size=3)
        cams.append(Camera.from_center(100, 100, 50, 40, R, c))
    return cams


class TestUmeyama:
    def test_identity(self, rng):
        X = rng.normal(size=(10, 3))
        T = umeyama_sim3(X, X)
        assert T.s == pytest.approx(1.0, abs=1e-12)
        np.testing.assert_allclose(T.R, np.eye(3), atol=1e-12)
        np.testing.assert_allclose(T.t, 0, atol=1e-12)

    def test_known_transform(self, rng):
        X = rng.normal(size=(20, 3))
        Rz = Rotation.from_euler("z", 90, degrees=True).as_matrix()
        Y = 2 * X @ Rz.T + [1, 0, 0]
        T = umeyama_sim3(X, Y)
        assert abs(T.s - 2) < 1e-9
        assert np.abs(T.R - Rz).max() < 1e-9 and np.abs(T.t - [1, 0, 0]).max() < 1e-9

    def test_noisy_matches_numerical_optimum(self, rng):
        X = rng.normal(size=(30, 3))
        R = Rotation.random(random_state=4).as_matrix()
        Y = 1.7 * X @ R.T + [0.3, -1, 2] + 1e-3 * rng.normal(size=X.shape)
        T = umeyama_sim3(X, Y)

        def cost(p):
            Rp = Rotation.from_rotvec(p[:3]).as_matrix()
            return np.sum((np.exp(p[3]) * X @ Rp.T + p[4:] - Y) ** 2)

        x0 = np.concatenate([Rotation.from_matrix(T.R).as_rotvec() + 0.01, [np.log(T.s) + 0.01], T.t + 0.01])
        best = minimize(cost, x0, method="BFGS", options={"gtol": 1e-12}).fun
        ours = cost(np.concatenate([Rotation.from_matrix(T.R).as_rotvec(), [np.log(T.s)], T.t]))
        assert np.sqrt(ours / len(X)) <= np.sqrt(best / len(X)) + 1e-6

    def test_reflection_guard(self, rng):
        X = rng.normal(size=(10, 3))
        Y = X * [1, 1, -1]
        assert np.linalg.det(umeyama_sim3(X, Y).R) == pytest.approx(1.0)

    @pytest.mark.parametrize("n", [0, 2])
    def test_too_few(self, n):
        with pytest.raises(DegenerateInputError):
            umeyama_sim3(np.zeros((n, 3)), np.zeros((n, 3)))

    def test_coincident(self):
        with pytest.raises(DegenerateInputError):
            umeyama_sim3(np.ones((5, 3)), np.zeros((5, 3)))

    def test_length_mismatch(self):
        with pytest.raises(InvalidArgumentError):
            umeyama_sim3(np.zeros((4, 3)), np.zeros((5, 3)))

    def test_bad_scale(self):
        with pytest.raises(InvalidArgumentError):
            Sim3Transform(0.0, np.eye(3), np.zeros(3))


class TestMetrics:
    def test_identity(self, rng):
        cams = _trajectory(rng)
        m = compute_metrics(cams, cams)
        assert m.ate_mean == pytest.approx(0, abs=1e-12) and m.rot_mean_deg == pytest.approx(0, abs=1e-6)
        assert m.rpe_trans_mean == pytest.approx(0, abs=1e-12) and m.align_scale == pytest.approx(1.0)

    def test_scaled_by_three(self, rng):
        ref = _trajectory(rng)
        pred = [c.with_pose(c.R, 3 * c.tau) for c in ref]  # centers scale by 3 about the origin
        m = compute_metrics(pred, ref)
        assert m.ate_mean < 1e-9 and m.rot_mean_deg < 1e-6
        assert m.align_scale == pytest.approx(1 / 3)

    def test_constant_rotation_offset(self, rng):
        ref = _trajectory(rng)
        off = Rotation.from_rotvec(np.radians(5) * np.array([0.6, 0.0, 0.8])).as_matrix()
        pred = [Camera.from_center(c.fx, c.fy, c.cx, c.cy, off @ c.R, c.center) for c in ref]
        m = compute_metrics(pred, ref)
        assert m.rot_mean_deg == pytest.approx(5.0, abs=1e-6)
        assert m.ate_mean < 1e-9

    @given(st.integers(0, 2**31 - 1))
    @settings(max_examples=20, deadline=None)
    def test_sim3_invariance(self, seed):
        r = np.random.default_rng(seed)
        ref = _trajectory(r)
        noisy = [Camera.from_center(100, 100, 50, 40, c.R, c.center + 0.01 * r.normal(size=3)) for c in ref]
        T = Sim3Transform(r.uniform(0.2, 5), Rotation.random(random_state=seed % 1000).as_matrix(), r.normal(size=3))
        a = compute_metrics(noisy, ref)
        b = compute_metrics([T.apply_camera(c) for c in noisy], ref)
        for f in ("ate_mean", "ate_rmse", "rot_mean_deg", "rpe_trans_mean"):
            assert abs(getattr(a, f) - getattr(b, f)) < 1e-9

    def test_apply_camera_preserves_projection(self, rng):
        cam = _trajectory(rng, 1)[0]
        T = Sim3Transform(2.5, Rotation.random(random_state=1).as_matrix(), [1, 2, 3])
        X = rng.normal(size=(5, 3)) + cam.center + cam.R[2] * 5
        from stitch4d.camera import project_points
        u0, v0, _ = project_points(cam, X)
        u1, v1, _ = project_points(T.apply_camera(cam), T.apply(X))
        np.testing.assert_allclose(u0, u1, atol=1e-9)
        np.testing.assert_allclose(v0, v1, atol=1e-9)

    def test_json_keys(self, rng):
        cams = _trajectory(rng)
        doc = json.loads(metrics_json(compute_metrics(cams, cams)))
        assert set(doc) == {"ATE Mean", "ATE RMSE", "Rot Mean (Deg)", "RPE Trans Mean", "Align Scale"}

    def test_too_short(self, rng):
        cams = _trajectory(rng, 2)
        with pytest.raises(DegenerateInputError):
            compute_metrics(cams, cams)
