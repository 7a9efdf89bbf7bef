import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bevfg.camera import (
    CameraIntrinsics,
    Pose,
    Z_NEAR,
    compose,
    invert,
    project,
    relative_pose,
    unproject,
)
from bevfg.errors import InvalidCamera, NonPositiveDepth
from bevfg.synthscene import trajectory

K100 = CameraIntrinsics(100.0, 100.0, 50.0, 50.0, 200, 100)


def random_pose(rng) -> Pose:
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    R = np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )
    return Pose(R, rng.normal(size=3) * 3)


def assert_pose_close(a: Pose, b: Pose, tol=1e-9):
    np.testing.assert_allclose(a.rotation, b.rotation, atol=tol, rtol=0)
    np.testing.assert_allclose(a.translation, b.translation, atol=tol, rtol=0)


class TestIntrinsics:
    def test_rejects_bad_focal(self):
        with pytest.raises(InvalidCamera):
            CameraIntrinsics(0.0, 1.0, 0.0, 0.0, 10, 10)

    def test_rejects_principal_point_outside(self):
        with pytest.raises(InvalidCamera):
            CameraIntrinsics(1.0, 1.0, 10.0, 0.0, 10, 10)

    def test_matrix(self):
        np.testing.assert_array_equal(K100.matrix, [[100, 0, 50], [0, 100, 50], [0, 0, 1]])

    def test_scaled_maps_pixel_lattice(self):
        Ks = CameraIntrinsics(110.0, 110.0, 143.5, 47.5, 288, 96).scaled(4)
        assert (Ks.width, Ks.height) == (72, 24)
        # full-res pixel 4j projects to scaled pixel j
        x = np.array([[1.0, -0.5, 7.0]])
        u_full, _, _ = project(CameraIntrinsics(110.0, 110.0, 143.5, 47.5, 288, 96), x)
        u_small, _, _ = project(Ks, x)
        np.testing.assert_allclose(u_small * 4, u_full, rtol=1e-12)

    def test_pixel_grid_row_major(self):
        g = CameraIntrinsics(1.0, 1.0, 0.0, 0.0, 3, 2).pixel_grid()
        np.testing.assert_array_equal(g, [[0, 0], [1, 0], [2, 0], [0, 1], [1, 1], [2, 1]])

    def test_dict_round_trip(self):
        assert CameraIntrinsics.from_dict(K100.to_dict()) == K100


class TestProject:
    def test_optical_axis(self):
        u, z, valid = project(K100, np.array([0.0, 0.0, 2.0]))
        np.testing.assert_array_equal(u, [50.0, 50.0])
        assert z == 2.0 and valid

    def test_pinhole_formula(self):
        u, z, _ = project(K100, np.array([1.0, 0.0, 1.0]))
        np.testing.assert_array_equal(u, [150.0, 50.0])
        assert z == 1.0

    def test_zero_depth_invalid(self):
        _, _, valid = project(K100, np.array([0.0, 0.0, 0.0]))
        assert not valid

    def test_near_plane(self):
        _, _, valid = project(K100, np.array([[0.0, 0.0, Z_NEAR], [0.0, 0.0, Z_NEAR * 1.01]]))
        np.testing.assert_array_equal(valid, [False, True])

    def test_out_of_bounds_invalid(self):
        _, _, valid = project(K100, np.array([[10.0, 0.0, 1.0], [0.0, 0.0, -1.0]]))
        assert not valid.any()


class TestUnproject:
    def test_principal_point(self):
        np.testing.assert_array_equal(unproject(K100, np.array([50.0, 50.0]), 5.0), [0.0, 0.0, 5.0])

    def test_one_focal_length_off_axis(self):
        np.testing.assert_allclose(unproject(K100, np.array([150.0, 50.0]), 1.0), [1.0, 0.0, 1.0], rtol=1e-15)

    def test_nonpositive_depth(self):
        with pytest.raises(NonPositiveDepth):
            unproject(K100, np.array([1.0, 1.0]), 0.0)

    def test_round_trip_1000(self):
        rng = np.random.default_rng(0)
        u = np.stack([rng.uniform(0, 199, 1000), rng.uniform(0, 99, 1000)], axis=1)
        d = rng.uniform(0.2, 80.0, 1000)
        u2, z, valid = project(K100, unproject(K100, u, d))
        assert valid.all()
        np.testing.assert_allclose(u2, u, atol=1e-9, rtol=0)
        np.testing.assert_allclose(z, d, atol=1e-9, rtol=0)


class TestPoses:
    def test_rejects_non_orthonormal(self):
        with pytest.raises(InvalidCamera):
            Pose(np.diag([1.0, 1.0, 1.1]), np.zeros(3))

    def test_rejects_reflection(self):
        with pytest.raises(InvalidCamera):
            Pose(np.diag([1.0, 1.0, -1.0]), np.zeros(3))

    def test_identity_left_neutral(self):
        p = random_pose(np.random.default_rng(1))
        assert_pose_close(compose(Pose.identity(), p), p)
        assert_pose_close(compose(p, Pose.identity()), p)

    def test_double_inverse(self):
        p = random_pose(np.random.default_rng(2))
        assert_pose_close(invert(invert(p)), p)

    def test_compose_order(self):
        # compose(first, second) applies first, then second
        a = Pose.from_yaw(0.3, (1.0, 0.0, 0.0))
        b = Pose.from_yaw(-0.1, (0.0, 0.0, 2.0))
        x = np.array([[0.5, -1.0, 3.0]])
        np.testing.assert_allclose(compose(a, b).apply(x), b.apply(a.apply(x)), atol=1e-12)

    def test_trajectory_chain(self):
        traj = trajectory(4, speed=1.1, yaw_rate=0.015)
        t01 = relative_pose(traj[0], traj[1])
        t12 = relative_pose(traj[1], traj[2])
        t02 = relative_pose(traj[0], traj[2])
        assert_pose_close(compose(t01, t12), t02)

    def test_dict_round_trip(self):
        p = random_pose(np.random.default_rng(3))
        assert_pose_close(Pose.from_dict(p.to_dict()), p, tol=0)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_group_laws(seed):
    rng = np.random.default_rng(seed)
    a, b, c = random_pose(rng), random_pose(rng), random_pose(rng)
    assert_pose_close(compose(a, invert(a)), Pose.identity())
    assert_pose_close(compose(invert(a), a), Pose.identity())
    assert_pose_close(compose(compose(a, b), c), compose(a, compose(b, c)))
