import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hiersplat.errors import BehindCamera
from hiersplat.geometry import (
    Intrinsics,
    RigidPose,
    compose,
    constant_velocity_predict,
    project,
    rotvec_to_quat,
    unproject,
)

from conftest import random_pose, rotation_angle_deg


class TestProject:
    def test_optical_axis_hits_principal_point(self):
        K = Intrinsics(100.0, 100.0, 50.0, 50.0, 100, 100)
        pixel, depth = project(np.array([0.0, 0.0, 1.0]), RigidPose.identity(), K)
        assert np.allclose(pixel, [50.0, 50.0])
        assert depth == 1.0

    def test_lateral_offset_scales_with_focal(self):
        K = Intrinsics(100.0, 100.0, 50.0, 50.0, 100, 100)
        pixel, _ = project(np.array([0.1, 0.0, 1.0]), RigidPose.identity(), K)
        assert np.allclose(pixel, [60.0, 50.0])

    def test_matches_matrix_oracle(self, rng):
        # independent 4x4 homogeneous multiply + divide
        K = Intrinsics(80.0, 90.0, 31.5, 33.0, 64, 68)
        for _ in range(50):
            pose = random_pose(rng)
            point = pose.transform(
                np.array([rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(0.5, 5)])
            )
            T = np.linalg.inv(pose.matrix())
            hom = T @ np.append(point, 1.0)
            expected = np.array(
                [K.fx * hom[0] / hom[2] + K.cx, K.fy * hom[1] / hom[2] + K.cy]
            )
            pixel, depth = project(point, pose, K)
            assert np.allclose(pixel, expected, atol=1e-9)
            assert np.isclose(depth, hom[2])

    def test_behind_camera_raises(self):
        K = Intrinsics(100.0, 100.0, 50.0, 50.0, 100, 100)
        with pytest.raises(BehindCamera):
            project(np.array([0.0, 0.0, -1.0]), RigidPose.identity(), K)

    def test_unproject_inverts_project(self, rng):
        K = Intrinsics(75.0, 75.0, 31.5, 31.5, 64, 64)
        for _ in range(100):
            pose = random_pose(rng)
            depth = rng.uniform(0.1, 100.0)
            cam = np.array([rng.uniform(-0.3, 0.3) * depth, rng.uniform(-0.3, 0.3) * depth, depth])
            world = pose.transform(cam)
            pixel, z = project(world, pose, K)
            back = unproject(pixel, z, pose, K)
            assert np.allclose(back, world, atol=1e-9)


class TestCompose:
    def test_identity(self, rng):
        p = random_pose(rng)
        assert np.allclose(compose(RigidPose.identity(), p).matrix(), p.matrix())

    def test_inverse_law(self, rng):
        p = random_pose(rng)
        assert np.allclose(compose(p, p.inverse()).matrix(), np.eye(4), atol=1e-9)

    def test_matches_matrix_product(self, rng):
        for _ in range(50):
            a, b = random_pose(rng), random_pose(rng)
            assert np.allclose(compose(a, b).matrix(), a.matrix() @ b.matrix(), atol=1e-12)

    def test_norm_preserved_over_many_compositions(self, rng):
        pose = RigidPose.identity()
        step = random_pose(np.random.default_rng(7), translation_scale=0.01)
        for _ in range(10_000):
            pose = compose(pose, step)
        assert abs(np.linalg.norm(pose.quat) - 1.0) < 1e-7


class TestConstantVelocity:
    def test_zero_velocity(self, rng):
        p = random_pose(rng)
        pred = constant_velocity_predict(p, p)
        assert np.allclose(pred.matrix(), p.matrix(), atol=1e-12)

    def test_pure_translation_advances(self):
        step = np.array([0.0, 0.0, 0.1])
        p2 = RigidPose.identity()
        p1 = RigidPose(np.array([0, 0, 0, 1.0]), step)
        pred = constant_velocity_predict(p1, p2)
        assert np.allclose(pred.trans, 2 * step, atol=1e-12)

    def test_pure_yaw_advances(self):
        yaw = math.radians(5.0)
        q = rotvec_to_quat(np.array([0.0, 0.0, yaw]))
        p2 = RigidPose.identity()
        p1 = RigidPose(q, np.zeros(3))
        pred = constant_velocity_predict(p1, p2)
        expected = RigidPose(rotvec_to_quat(np.array([0.0, 0.0, 2 * yaw])), np.zeros(3))
        assert rotation_angle_deg(pred, expected) < 1e-9

    def test_exact_for_constant_motion(self, rng):
        # any fixed relative step, extrapolated 100 times
        step = random_pose(rng, translation_scale=0.05)
        poses = [RigidPose.identity(), step]
        for _ in range(100):
            poses.append(compose(poses[-1], compose(poses[-2].inverse(), poses[-1])))
        expected = RigidPose.identity()
        for _ in range(len(poses) - 1):
            expected = compose(expected, step)
        assert np.allclose(poses[-1].matrix(), expected.matrix(), atol=1e-9)


class TestRetract:
    def test_zero_is_identity(self, rng):
        p = random_pose(rng)
        assert np.allclose(p.retract(np.zeros(6)).matrix(), p.matrix())

    def test_jacobian_matches_convention(self, rng):
        # d(x_cam)/d(xi) at 0 must be [I | -[x_cam]x]
        pose = random_pose(rng)
        point = pose.transform(np.array([0.2, -0.1, 2.0]))
        eps = 1e-6

        def cam(xi):
            R, t = pose.retract(xi).world_to_camera()
            return R @ point + t

        x0 = cam(np.zeros(6))
        skew = np.array(
            [[0, -x0[2], x0[1]], [x0[2], 0, -x0[0]], [-x0[1], x0[0], 0]]
        )
        expected = np.concatenate([np.eye(3), -skew], axis=1)
        J = np.zeros((3, 6))
        for k in range(6):
            e = np.zeros(6)
            e[k] = eps
            J[:, k] = (cam(e) - cam(-e)) / (2 * eps)
        assert np.allclose(J, expected, atol=1e-8)

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=25, deadline=None)
    def test_quaternion_stays_unit(self, seed):
        r = np.random.default_rng(seed)
        pose = RigidPose(r.normal(size=4), r.normal(size=3))
        for _ in range(50):
            pose = pose.retract(r.normal(size=6) * 0.1)
        assert abs(np.linalg.norm(pose.quat) - 1.0) < 1e-9


def test_intrinsics_validation():
    with pytest.raises(ValueError):
        Intrinsics(-1.0, 1.0, 0.0, 0.0, 10, 10)
    with pytest.raises(ValueError):
        Intrinsics(10.0, 10.0, 12.0, 0.0, 10, 10)
