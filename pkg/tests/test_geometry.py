import numpy as np
import pytest

from gs4d.geometry import (
    CameraPose,
    DepthBins,
    advance,
    compose_rotation,
    expected_depth,
    project,
    quat_to_rot,
    unproject,
)
from gs4d.tensor import Tensor

from helpers import finite_difference


def identity_pose():
    return CameraPose(E=np.eye(3), R=np.eye(3), V=np.zeros(3))


def random_pose(rng):
    q = rng.standard_normal(4)
    q /= np.linalg.norm(q)
    r = quat_to_rot(q)
    fx, fy = rng.uniform(50, 200, size=2)
    cx, cy = rng.uniform(10, 100, size=2)
    e = np.array([[fx, 0.0, cx], [0.0, fy, cy], [0.0, 0.0, 1.0]])
    v = rng.uniform(-20, 20, size=3)
    return CameraPose(E=e, R=r, V=v)


class TestCameraPose:
    def test_rejects_bad_intrinsics(self):
        with pytest.raises(ValueError):
            CameraPose(E=np.diag([1.0, 1.0, 2.0]), R=np.eye(3), V=np.zeros(3))
        with pytest.raises(ValueError):
            CameraPose(E=np.zeros((3, 3)), R=np.eye(3), V=np.zeros(3))

    def test_rejects_non_rotation(self):
        with pytest.raises(ValueError):
            CameraPose(E=np.eye(3), R=2.0 * np.eye(3), V=np.zeros(3))
        with pytest.raises(ValueError):
            CameraPose(E=np.eye(3), R=np.diag([1.0, 1.0, -1.0]), V=np.zeros(3))


class TestExpectedDepth:
    def test_one_hot_limit(self):
        bins = DepthBins(L=8, d_min=2.0, d_max=10.0)
        for target in (0, 3, 7):
            logits = np.full(8, -1000.0)
            logits[target] = 0.0
            d = expected_depth(Tensor(logits), 0.0, bins)
            assert abs(d.item() - bins.centers[target]) < 1e-9

    def test_uniform_is_mean_of_centers(self):
        bins = DepthBins(L=4, d_min=1.0, d_max=4.0)
        d = expected_depth(Tensor(np.zeros(4)), 0.0, bins)
        assert abs(d.item() - 2.5) < 1e-12

    def test_refinement_additivity(self):
        bins = DepthBins(L=4, d_min=1.0, d_max=4.0)
        d = expected_depth(Tensor(np.zeros(4)), 0.3, bins)
        assert abs(d.item() - 2.8) < 1e-12

    def test_monotone_slope_one_in_refinement(self):
        bins = DepthBins(L=16, d_min=0.5, d_max=80.0)
        rng = np.random.default_rng(0)
        logits = Tensor(rng.standard_normal(16))
        base = expected_depth(logits, 0.0, bins).item()
        for dr in (-3.0, 0.7, 12.0):
            assert abs(expected_depth(logits, dr, bins).item() - (base + dr)) < 1e-12

    def test_bin_axis_placement(self):
        bins = DepthBins(L=4, d_min=1.0, d_max=4.0)
        logits = Tensor(np.zeros((4, 2, 2)))
        d = expected_depth(logits, 0.0, bins, axis=0)
        assert d.shape == (2, 2)
        np.testing.assert_allclose(d.data, 2.5)

    def test_index_of_round_trips_centers(self):
        bins = DepthBins(L=32, d_min=0.5, d_max=80.0)
        np.testing.assert_array_equal(bins.index_of(bins.centers), np.arange(32))


class TestUnprojectProject:
    def test_identity_pose_on_axis(self):
        xyz = unproject(0.0, 0.0, 0.0, 0.0, 5.0, identity_pose())
        np.testing.assert_allclose(xyz, [0.0, 0.0, 5.0])

    def test_translation_additivity(self):
        cam = CameraPose(E=np.eye(3), R=np.eye(3), V=np.array([1.0, 2.0, 3.0]))
        xyz = unproject(0.0, 0.0, 0.0, 0.0, 5.0, cam)
        np.testing.assert_allclose(xyz, [1.0, 2.0, 8.0])

    def test_project_identity(self):
        u, v, d = project(np.array([0.0, 0.0, 5.0]), identity_pose())
        assert (u, v, d) == (0.0, 0.0, 5.0)

    def test_behind_camera_signal(self):
        u, v, d = project(np.array([0.0, 0.0, -1.0]), identity_pose())
        assert d < 0.0  # caller culls on the depth signal

    @pytest.mark.parametrize("seed", range(100))
    def test_round_trip(self, seed):
        rng = np.random.default_rng(seed)
        cam = random_pose(rng)
        u, v = rng.uniform(0, 128), rng.uniform(0, 64)
        depth = rng.uniform(0.1, 200.0)
        xyz = unproject(u, v, 0.0, 0.0, depth, cam)
        u2, v2, d2 = project(xyz, cam)
        assert max(abs(u2 - u), abs(v2 - v), abs(d2 - depth)) < 1e-9

    def test_vectorized_project_matches_scalar(self):
        rng = np.random.default_rng(7)
        cam = random_pose(rng)
        pts = cam.V + cam.R @ np.array([0.3, -0.2, 4.0]) + rng.standard_normal((16, 3)) * 0.1
        u, v, d = project(pts, cam)
        for i in range(16):
            ui, vi, di = project(pts[i], cam)
            assert abs(u[i] - ui) < 1e-12 and abs(v[i] - vi) < 1e-12 and abs(d[i] - di) < 1e-12

    def test_depth_gradient_analytic(self):
        rng = np.random.default_rng(11)
        cam = random_pose(rng)
        u, v = 17.0, 9.0
        du, dv = 0.25, -0.5
        depth = Tensor(np.array(4.0), requires_grad=True)
        xyz = unproject(u, v, du, dv, depth, cam)
        xyz.sum().backward()
        ray = cam.R @ cam.E_inv @ np.array([u + du, v + dv, 1.0])
        assert abs(depth.grad - ray.sum()) < 1e-12
        fd = finite_difference(
            lambda: float(unproject(u, v, du, dv, float(depth.data), cam).sum()), [depth.data]
        )[0]
        assert abs(depth.grad - fd) < 1e-6

    def test_offset_gradients_flow(self):
        cam = identity_pose()
        du = Tensor(np.zeros((2, 2)), requires_grad=True)
        dv = Tensor(np.zeros((2, 2)), requires_grad=True)
        depth = Tensor(np.full((2, 2), 3.0), requires_grad=True)
        u = np.arange(2.0).reshape(1, 2)
        v = np.arange(2.0).reshape(2, 1)
        xyz = unproject(u, v, du, dv, depth, cam)
        assert xyz.shape == (2, 2, 3)
        xyz.sum().backward()
        assert du.grad is not None and dv.grad is not None and depth.grad is not None
        np.testing.assert_allclose(du.grad, 3.0)  # d(x)/d(du) = depth for E = I


class TestAdvance:
    def test_zero_flow_identity(self):
        p = np.array([1.0, 2.0, 3.0])
        np.testing.assert_array_equal(advance(p, np.zeros(3)), p)

    def test_componentwise(self):
        out = advance(np.array([1.0, 1.0, 1.0]), np.array([0.5, 0.0, -0.5]))
        np.testing.assert_allclose(out, [1.5, 1.0, 0.5])

    def test_inverse_flow(self):
        rng = np.random.default_rng(3)
        p = rng.standard_normal((5, 3))
        f = rng.standard_normal((5, 3))
        np.testing.assert_allclose(advance(advance(p, f), -f), p, atol=1e-15)

    def test_rigid_translation_preserves_distances(self):
        rng = np.random.default_rng(4)
        pts = rng.standard_normal((6, 3))
        flow = np.tile(rng.standard_normal(3), (6, 1))
        moved = advance(pts, flow)
        before = np.linalg.norm(pts[:, None] - pts[None, :], axis=-1)
        after = np.linalg.norm(moved[:, None] - moved[None, :], axis=-1)
        np.testing.assert_allclose(after, before, atol=1e-12)

    def test_differentiable_through_both(self):
        p = Tensor(np.ones((4, 3)), requires_grad=True)
        f = Tensor(np.zeros((4, 3)), requires_grad=True)
        advance(p, f).sum().backward()
        np.testing.assert_array_equal(p.grad, np.ones((4, 3)))
        np.testing.assert_array_equal(f.grad, np.ones((4, 3)))


class TestComposeRotation:
    def test_identity_delta(self):
        r = np.array([0.5, 0.5, 0.5, 0.5])
        np.testing.assert_allclose(compose_rotation(r, [1.0, 0.0, 0.0, 0.0]), r, atol=1e-15)

    def test_two_quarter_turns(self):
        quarter = np.array([np.cos(np.pi / 4), 0.0, 0.0, np.sin(np.pi / 4)])
        half = compose_rotation(quarter, quarter)
        np.testing.assert_allclose(half, [0.0, 0.0, 0.0, 1.0], atol=1e-15)
        np.testing.assert_allclose(quat_to_rot(half), np.diag([-1.0, -1.0, 1.0]), atol=1e-15)

    def test_output_normalized(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            r = rng.standard_normal(4)
            r /= np.linalg.norm(r)
            dr = rng.standard_normal(4)
            out = compose_rotation(r, dr)
            assert abs(np.linalg.norm(out) - 1.0) < 1e-12

    def test_zero_product_rejected(self):
        with pytest.raises(ValueError):
            compose_rotation(np.array([1.0, 0, 0, 0]), np.zeros(4))


def test_quat_to_rot_is_orthonormal():
    rng = np.random.default_rng(6)
    q = rng.standard_normal((10, 4))
    q /= np.linalg.norm(q, axis=-1, keepdims=True)
    r = quat_to_rot(q)
    eye = np.einsum("nij,nkj->nik", r, r)
    np.testing.assert_allclose(eye, np.tile(np.eye(3), (10, 1, 1)), atol=1e-12)
