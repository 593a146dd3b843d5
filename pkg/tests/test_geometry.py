import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.spatial import ConvexHull
from scipy.spatial.transform import Rotation

from srp.geometry import (CameraIntrinsics, DepthImage, MeshFormatError, ModelInfo, Pose, TriMesh,
                          axis_angle_to_quat, backproject, backproject_pixel, compose, convex_hull_2d,
                          euler_to_quat, look_at, parse_obj, polygon_area, pose_error, quat_angle,
                          quat_to_matrix, read_pgm, write_pgm)
from srp.models import box_mesh

angles = st.floats(-np.pi, np.pi, allow_nan=False)
coords = st.floats(-2, 2, allow_nan=False)
quats = st.lists(st.floats(-1, 1, allow_nan=False), min_size=4, max_size=4).filter(
    lambda q: np.linalg.norm(q) > 1e-3)
poses = st.builds(lambda p, q: Pose(p, q), st.lists(coords, min_size=3, max_size=3), quats)


@given(angles, st.floats(-1.5, 1.5), angles)
def test_euler_matches_scipy_extrinsic_xyz(roll, pitch, yaw):
    ours = quat_to_matrix(euler_to_quat(roll, pitch, yaw))
    ref = Rotation.from_euler("xyz", [roll, pitch, yaw]).as_matrix()
    assert np.allclose(ours, ref, atol=1e-12)


@given(angles, st.floats(-1.5, 1.5), angles)
def test_euler_round_trip(roll, pitch, yaw):
    p = Pose.from_euler([0, 0, 0], roll, pitch, yaw)
    assert Pose.from_euler([0, 0, 0], *p.euler).allclose(p, atol=1e-9)


@given(poses, poses)
def test_compose_matches_matrix_product(a, b):
    assert np.allclose(compose(a, b).matrix(), a.matrix() @ b.matrix(), atol=1e-9)


@given(poses)
def test_inverse_is_identity(p):
    assert (p @ p.inverse()).allclose(Pose.identity(), atol=1e-9)
    assert (p.inverse() @ p).allclose(Pose.identity(), atol=1e-9)


@given(poses)
def test_quaternion_is_unit_and_canonical(p):
    assert np.isclose(np.linalg.norm(p.orientation), 1.0)
    assert p.orientation[0] >= 0


def test_pose_rejects_non_finite():
    with pytest.raises(ValueError):
        Pose([np.nan, 0, 0])
    with pytest.raises(ValueError):
        Pose([0, 0, 0], [0, 0, 0, 0])


@given(poses)
def test_pose_dict_round_trip(p):
    assert Pose.from_dict(p.to_dict()).allclose(p, atol=1e-12)


def test_look_at_points_z_forward():
    p = look_at([1, 0, 0], [0, 0, 0])
    assert np.allclose(p.rotation[:, 2], [-1, 0, 0])
    # y (down in the image) points against world up
    assert p.rotation[2, 1] < 0


def test_default_intrinsics_scaling():
    cam = CameraIntrinsics.default()
    assert (cam.width, cam.height) == (160, 120)
    assert np.isclose(cam.fx, 131.25) and np.isclose(cam.cx, 79.5) and np.isclose(cam.cy, 59.5)


def test_intrinsics_validation():
    with pytest.raises(ValueError):
        CameraIntrinsics(0, 1, 0, 0, 10, 10)
    with pytest.raises(ValueError):
        CameraIntrinsics(1, 1, 0, 0, 10, 10, near=2, far=1)


@given(st.floats(0.2, 3.0), st.integers(0, 159), st.integers(0, 119))
def test_backproject_inverts_projection(d, u, v):
    cam = CameraIntrinsics.default()
    x, y, z = backproject_pixel(u, v, d, cam)
    assert np.isclose(cam.fx * x / z + cam.cx, u) and np.isclose(cam.fy * y / z + cam.cy, v)
    assert np.isclose(z, d)


def test_backproject_skips_missing_and_checks_size(cam):
    data = np.zeros((cam.height, cam.width))
    data[10, 20] = 1.5
    pts = backproject(DepthImage(data), cam)
    assert pts.shape == (1, 3) and np.allclose(pts[0], backproject_pixel(20, 10, 1.5, cam))
    with pytest.raises(ValueError):
        backproject(DepthImage(np.zeros((5, 5))), cam)


def test_depth_image_validation():
    with pytest.raises(ValueError):
        DepthImage(np.full((2, 2), -1.0))
    with pytest.raises(ValueError):
        DepthImage(np.zeros(4))


def test_pgm_round_trip_is_millimetric(tmp_path, rng):
    data = np.round(rng.uniform(0, 3, (12, 16)), 3)
    data[0, 0] = 0.0
    write_pgm(tmp_path / "d.pgm", DepthImage(data))
    raw = (tmp_path / "d.pgm").read_bytes()
    assert raw.startswith(b"P5\n16 12\n65535\n")
    back = read_pgm(tmp_path / "d.pgm")
    assert np.allclose(back.data, data, atol=5e-4) and back.data[0, 0] == 0


def test_obj_parser_errors_carry_line_numbers():
    with pytest.raises(MeshFormatError, match=":3: non-triangular"):
        parse_obj("v 0 0 0\nv 1 0 0\nf 1 2 1 2\n")
    with pytest.raises(MeshFormatError, match=":2: face index 5 out of range"):
        parse_obj("v 0 0 0\nf 1 1 5\n")
    with pytest.raises(MeshFormatError, match=":1: bad vertex"):
        parse_obj("v a b c\n")


def test_obj_round_trip_and_negative_indices():
    m = box_mesh(1, 2, 3)
    back = parse_obj(m.to_obj())
    assert np.allclose(back.vertices, m.vertices) and (back.triangles == m.triangles).all()
    neg = parse_obj("v 0 0 0\nv 1 0 0\nv 0 1 0\nf -3 -2 -1\nvn 0 0 1\n")
    assert neg.triangles.tolist() == [[0, 1, 2]]


def test_model_box_must_enclose_mesh():
    with pytest.raises(ValueError):
        ModelInfo("m", box_mesh(1, 1, 1), (0.5, 1, 1))


def test_pose_error_symmetry_ignores_spin(registry):
    truth = Pose([0, 0, 0.8])
    spun = Pose([0.01, 0, 0.8], axis_angle_to_quat([0, 0, 1], 1.3))
    dt, dth = pose_error(spun, truth, registry["can"])
    assert np.isclose(dt, 0.01) and dth < 1e-9
    _, dth_asym = pose_error(spun, truth, registry["mug"])
    assert np.isclose(dth_asym, 1.3)


@given(quats, st.floats(-np.pi, np.pi))
def test_pose_error_symmetric_keeps_tilt(q, spin):
    from srp.models import builtin_registry
    can = builtin_registry()["can"]
    truth = Pose([0, 0, 0], q)
    est = Pose([0, 0, 0], truth.orientation)
    est_spun = Pose([0, 0, 0], (truth @ Pose([0, 0, 0], axis_angle_to_quat([0, 0, 1], spin))).orientation)
    assert pose_error(est_spun, truth, can)[1] < 1e-6
    tilted = truth @ Pose([0, 0, 0], axis_angle_to_quat([1, 0, 0], 0.4))
    assert np.isclose(pose_error(tilted, truth, can)[1], 0.4, atol=1e-9)
    assert pose_error(est, truth)[1] < 1e-6


@given(st.lists(st.tuples(coords, coords), min_size=3, max_size=40))
def test_hull_matches_scipy(points):
    pts = np.array(points)
    hull = convex_hull_2d(pts)
    try:
        ref = ConvexHull(pts)
    except Exception:  # degenerate input: collinear or repeated points
        assert abs(polygon_area(hull)) < 1e-9
        return
    assert np.isclose(polygon_area(hull), ref.volume, rtol=1e-9, atol=1e-12)
    assert polygon_area(hull) > 0  # counter-clockwise


def test_quat_angle_range():
    q = axis_angle_to_quat([0, 0, 1], np.array([0.0, np.pi / 2, np.pi, 1.5 * np.pi]))
    assert np.allclose(quat_angle(q), [0, np.pi / 2, np.pi, np.pi / 2])
