import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tagpose.camera import (
    Z_MIN, CameraPose, DepthMap, Intrinsics, look_at, pixel_rays, project, read_depth_map, regulate_depth,
    unproject, unproject_pixels, write_depth_map,
)
from tagpose.diffcore import Value
from tagpose.diffcore.gradcheck import gradcheck
from tagpose.errors import BehindCameraError, DimensionError, DomainError, EmptyCloudError, SchemaError

VGA = Intrinsics(fx=500.0, fy=500.0, cx=320.0, cy=240.0, width=640, height=480)
SMALL = Intrinsics(fx=40.0, fy=42.0, cx=7.5, cy=5.5, width=16, height=12)

coord = st.floats(-2.0, 2.0, allow_nan=False)
depth = st.floats(0.1, 5.0, allow_nan=False)


def test_intrinsics_validation():
    with pytest.raises(ValueError):
        Intrinsics(0.0, 1.0, 1.0, 1.0, 4, 4)
    with pytest.raises(ValueError):
        Intrinsics(1.0, 1.0, 4.0, 1.0, 4, 4)


def test_optical_axis_hits_principal_point():
    np.testing.assert_allclose(project(np.array([0.0, 0.0, 1.0]), VGA), [320.0, 240.0])


def test_project_hand_value():
    assert project(np.array([1.0, 0.0, 2.0]), VGA)[0] == pytest.approx(570.0)


@settings(max_examples=80, deadline=None)
@given(coord, coord, depth, st.floats(0.1, 10.0))
def test_projection_is_scale_invariant(x, y, z, s):
    a = project(np.array([x, y, z]), VGA)
    b = project(np.array([x, y, z]) * s, VGA)
    np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-9)


def test_behind_camera_lists_indices():
    pts = np.array([[0, 0, 1.0], [0, 0, -1.0], [0, 0, Z_MIN]])
    with pytest.raises(BehindCameraError) as info:
        project(pts, VGA)
    assert list(info.value.indices) == [1, 2]


def test_non_strict_project_clamps():
    uv = project(np.array([[1e-3, 0, -1.0]]), VGA, strict=False)
    assert np.isfinite(uv).all()
    assert uv[0, 0] == pytest.approx(320 + 500 * 1e-3 / Z_MIN)


def test_project_dimension_error():
    with pytest.raises(DimensionError):
        project(np.zeros((3, 2)), VGA)


def test_single_pixel_unprojection():
    d = np.zeros((480, 640))
    mask = np.zeros((480, 640), dtype=bool)
    d[240, 320], mask[240, 320] = 1.0, True
    np.testing.assert_allclose(unproject(d, VGA, mask), [[0.0, 0.0, 1.0]])


def test_empty_mask_raises():
    with pytest.raises(EmptyCloudError):
        unproject(np.ones((12, 16)), SMALL, np.zeros((12, 16), dtype=bool))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_project_unproject_round_trip(seed):
    rng = np.random.default_rng(seed)
    d = rng.uniform(0.2, 4.0, (12, 16))
    mask = rng.random((12, 16)) < 0.4
    mask[0, 0] = True
    rows, cols = np.nonzero(mask)
    uv = project(unproject(d, SMALL, mask), SMALL)
    np.testing.assert_allclose(uv, np.stack([cols, rows], axis=1), atol=1e-9)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31), st.floats(0.01, 100.0))
def test_unprojection_scale_covariance(seed, lam):
    rng = np.random.default_rng(seed)
    D = DepthMap(rng.uniform(0.5, 2.0, (12, 16)), relative=True)
    mask = np.ones((12, 16), dtype=bool)
    a = unproject(regulate_depth(D, lam), SMALL, mask)
    b = unproject(regulate_depth(D, 1.0), SMALL, mask)
    np.testing.assert_allclose(a, lam * b, rtol=1e-15, atol=0)


def test_regulate_depth_examples():
    D = DepthMap(np.ones((3, 4)), relative=True)
    out = regulate_depth(D, 2.0)
    assert not out.relative
    np.testing.assert_array_equal(out.values, 2.0)
    np.testing.assert_array_equal(regulate_depth(D, 1.0).values, D.values)


@pytest.mark.parametrize("lam", [0.0, -1.0])
def test_regulate_depth_domain(lam):
    with pytest.raises(DomainError):
        regulate_depth(DepthMap(np.ones((2, 2)), relative=True), lam)
    with pytest.raises(DomainError):
        regulate_depth(np.ones((1, 2, 2)), np.array([lam]))


def test_regulate_depth_batched_value():
    D = Value(np.ones((2, 3, 3)))
    out = regulate_depth(D, Value(np.array([2.0, 3.0])))
    np.testing.assert_allclose(out.data[:, 0, 0], [2.0, 3.0])


def test_regulator_gradient_matches_finite_differences(rng):
    D = rng.uniform(0.5, 2.0, (1, 4, 5))
    res = gradcheck(lambda d, lam: (regulate_depth(d, lam) ** 2).sum(), [D, np.array([1.3])])
    assert res.ok, res.failures


def test_project_gradient(rng):
    pts = rng.normal(size=(6, 3)) * 0.3 + np.array([0, 0, 1.5])
    res = gradcheck(lambda p: (project(p, SMALL) ** 2).sum() * 1e-3, [pts])
    assert res.ok, res.failures


def test_unproject_pixels_gradient(rng):
    d = rng.uniform(0.5, 2.0, (2, 12, 16))
    rows = rng.integers(0, 12, (2, 5))
    cols = rng.integers(0, 16, (2, 5))
    res = gradcheck(lambda x: (unproject_pixels(x, SMALL, rows, cols) ** 2).sum(), [d], max_coords=40)
    assert res.ok, res.failures


def test_unproject_pixels_matches_unproject(rng):
    d = rng.uniform(0.5, 2.0, (12, 16))
    mask = rng.random((12, 16)) < 0.5
    rows, cols = np.nonzero(mask)
    batched = unproject_pixels(d[None], SMALL, rows[None], cols[None]).data[0]
    np.testing.assert_allclose(batched, unproject(d, SMALL, mask))


def test_pixel_rays_have_unit_depth():
    rays = pixel_rays(SMALL, np.array([0, 5]), np.array([0, 7]))
    np.testing.assert_allclose(rays[:, 2], 1.0)


def test_look_at_points_camera_at_target():
    pose = look_at([2.0, 0.5, 1.0], [0.0, 0.0, 0.2])
    target_cam = pose.R @ np.array([0.0, 0.0, 0.2]) + pose.T
    np.testing.assert_allclose(target_cam[:2], 0.0, atol=1e-12)
    assert target_cam[2] > 0


def test_camera_pose_validation():
    with pytest.raises(ValueError):
        CameraPose(np.diag([1.0, 1.0, -1.0]), np.zeros(3))
    with pytest.raises(DimensionError):
        CameraPose(np.eye(3), np.zeros(2))


def test_depth_map_validation():
    with pytest.raises(ValueError):
        DepthMap(np.array([[1.0, -1.0]]), relative=True)
    with pytest.raises(DimensionError):
        DepthMap(np.ones(3), relative=True)


@pytest.mark.parametrize("relative", [True, False])
def test_depth_file_round_trip(tmp_path, rng, relative):
    dm = DepthMap(rng.uniform(0, 3, (12, 16)).astype(np.float32), relative=relative)
    path = tmp_path / "d.bin"
    write_depth_map(path, dm)
    back = read_depth_map(path)
    assert back.relative == relative
    np.testing.assert_array_equal(back.values, dm.values)
    assert path.stat().st_size == 16 + 4 * 12 * 16


def test_depth_file_corruption(tmp_path):
    path = tmp_path / "d.bin"
    write_depth_map(path, DepthMap(np.ones((2, 2), dtype=np.float32), relative=True))
    raw = path.read_bytes()
    path.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(SchemaError):
        read_depth_map(path)
    path.write_bytes(raw[:-1])
    with pytest.raises(SchemaError):
        read_depth_map(path)
