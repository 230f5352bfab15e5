from importlib import resources

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import frames_homogeneous, points_oracle, rot_axis
from tagpose.diffcore import Value
from tagpose.errors import DimensionError, NumericError, SchemaError
from tagpose.kinematics import (
    axis_angle_matrix, default_robot, densify_surface, forward_kinematics, keypoints_from_config,
    load_robot, parse_robot, sample_config, surface_cloud_from_config,
)

angles = st.floats(-np.pi, np.pi, allow_nan=False)


def test_default_robot_shape(robot):
    assert robot.n_joints == 3
    assert robot.n_keypoints >= 4
    assert robot.n_surface > 0
    assert len(robot.digest()) == 64


def test_zero_config_planar_arm_is_straight(planar_arm):
    rots, trans = forward_kinematics(planar_arm, np.zeros(3))
    np.testing.assert_allclose(trans[:, 0], [0.0, 0.3, 0.55, 0.7], atol=1e-12)
    np.testing.assert_allclose(rots, np.broadcast_to(np.eye(3), (4, 3, 3)), atol=1e-12)


def test_planar_arm_end_effector_closed_form(planar_arm):
    q = np.array([0.4, -1.1, 0.7])
    _, trans = forward_kinematics(planar_arm, q)
    c = np.cumsum(q)
    x = 0.3 * np.cos(c[0]) + 0.25 * np.cos(c[1]) + 0.15 * np.cos(c[2])
    y = 0.3 * np.sin(c[0]) + 0.25 * np.sin(c[1]) + 0.15 * np.sin(c[2])
    np.testing.assert_allclose(trans[-1], [x, y, 0.0], atol=1e-12)


def test_fk_matches_homogeneous_composition(robot, rng):
    configs = sample_config(robot, rng, 200)
    rots, trans = forward_kinematics(robot, configs)
    for q, r, t in zip(configs, rots, trans):
        for k, h in enumerate(frames_homogeneous(robot, q)):
            np.testing.assert_allclose(r[k], h[:3, :3], atol=1e-9)
            np.testing.assert_allclose(t[k], h[:3, 3], atol=1e-9)


@settings(max_examples=60, deadline=None)
@given(st.lists(angles, min_size=3, max_size=3))
def test_fk_rotations_stay_orthonormal(q):
    rots, _ = forward_kinematics(default_robot(), np.array(q))
    for r in rots:
        np.testing.assert_allclose(r.T @ r, np.eye(3), atol=1e-12)
        assert abs(np.linalg.det(r) - 1.0) < 1e-12


@settings(max_examples=60, deadline=None)
@given(st.lists(angles, min_size=3, max_size=3), st.integers(-3, 3))
def test_fk_is_periodic_in_each_joint(q, turns):
    robot = default_robot()
    q = np.array(q)
    shifted = q + 2 * np.pi * turns
    for a, b in zip(forward_kinematics(robot, q), forward_kinematics(robot, shifted)):
        np.testing.assert_allclose(a, b, atol=1e-9)


@settings(max_examples=40, deadline=None)
@given(st.lists(angles, min_size=3, max_size=3), angles)
def test_keypoints_are_rigid_under_camera_motion(q, theta):
    robot = default_robot()
    q = np.array(q)
    base = keypoints_from_config(robot, q, np.eye(3), np.zeros(3))
    R = rot_axis(np.array([1.0, 2.0, 2.0]) / 3.0, theta)
    T = np.array([0.1, -0.2, 1.5])
    cam = keypoints_from_config(robot, q, R, T)
    np.testing.assert_allclose(cam, base @ R.T + T, atol=1e-12)
    dist = lambda x: np.linalg.norm(x[:, None] - x[None], axis=-1)
    np.testing.assert_allclose(dist(cam), dist(base), atol=1e-12)


def test_points_match_oracle(robot, rng):
    q = sample_config(robot, rng)
    R, T = rot_axis([0, 0, 1], 0.3), np.array([0.0, 0.1, 1.0])
    np.testing.assert_allclose(keypoints_from_config(robot, q, R, T),
                               points_oracle(robot, robot.keypoint_links, robot.keypoint_offsets, q, R, T), atol=1e-12)
    np.testing.assert_allclose(surface_cloud_from_config(robot, q, R, T),
                               points_oracle(robot, robot.surface_links, robot.surface_offsets, q, R, T), atol=1e-12)


def test_batched_matches_single(robot, rng):
    qs = sample_config(robot, rng, 5)
    Rs = np.stack([rot_axis([0, 1, 0], a) for a in rng.uniform(-1, 1, 5)])
    Ts = rng.normal(size=(5, 3))
    batch = keypoints_from_config(robot, qs, Rs, Ts)
    for i in range(5):
        np.testing.assert_allclose(batch[i], keypoints_from_config(robot, qs[i], Rs[i], Ts[i]), atol=1e-12)


def test_value_input_returns_value(robot):
    out = keypoints_from_config(robot, Value(np.zeros(3)), np.eye(3), np.zeros(3))
    assert isinstance(out, Value)
    assert out.shape == (robot.n_keypoints, 3)


def test_axis_angle_matches_series():
    axis = np.array([0.0, 0.6, 0.8])
    got = axis_angle_matrix(axis, np.array(0.9)).data
    np.testing.assert_allclose(got, rot_axis(axis, 0.9), atol=1e-12)


def test_wrong_dimension_raises(robot):
    with pytest.raises(DimensionError):
        forward_kinematics(robot, np.zeros(2))


def test_non_finite_raises(robot):
    with pytest.raises(NumericError):
        forward_kinematics(robot, np.array([0.0, np.nan, 0.0]))


def test_sample_config_within_limits(robot, rng):
    q = sample_config(robot, rng, 1000)
    assert (q >= robot.lower).all() and (q <= robot.upper).all()


def test_densify_inserts_points_between_same_link_samples(planar_arm):
    links, offsets = densify_surface(planar_arm, 4)
    assert len(links) == 3 + 2 * 3
    np.testing.assert_allclose(offsets[1], [0.025, 0, 0])


def test_load_bundled_and_file(tmp_path):
    path = tmp_path / "arm.robot"
    path.write_text(resources.files("tagpose.data").joinpath("default_arm.robot").read_text())
    assert load_robot(path).digest() == default_robot().digest()


BAD_ROBOTS = {
    "unknown section": "[link]\n",
    "unknown key": "[joint]\ncolor = red\n",
    "bad axis": "[joint]\naxis = 0 0 2\norigin_translation = 0 0 0\nlower = -1\nupper = 1\n",
    "prismatic": "[joint]\ntype = prismatic\naxis = 0 0 1\norigin_translation = 0 0 0\nlower = -1\nupper = 1\n",
    "limits": "[joint]\naxis = 0 0 1\norigin_translation = 0 0 0\nlower = 1\nupper = -1\n",
    "no joints": "[keypoint]\nlink = 0\noffset = 0 0 0\n",
    "too few keypoints": "[joint]\naxis = 0 0 1\norigin_translation = 0 0 0\nlower = -1\nupper = 1\n"
                         "[keypoint]\nlink = 0\noffset = 0 0 0\n",
    "not numeric": "[joint]\naxis = a b c\n",
}


@pytest.mark.parametrize("name", sorted(BAD_ROBOTS))
def test_schema_errors(name):
    with pytest.raises(SchemaError):
        parse_robot(BAD_ROBOTS[name])


def test_schema_error_reports_line():
    with pytest.raises(SchemaError) as info:
        parse_robot("# comment\n[joint]\naxis = 0 0 1\nbogus = 1\n", path="x.robot")
    assert info.value.line == 4
    assert "x.robot" in str(info.value)
