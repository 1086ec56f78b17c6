"""Camera geometry: projection round trips, plane fitting, depth conversions."""

import numpy as np
import pytest

from arapdepth import (
    BehindCameraError,
    CameraIntrinsics,
    ConfigurationError,
    DegenerateTripleError,
    DomainError,
    GrazingRayError,
    PlaneParams,
    Point3,
    UnitRay,
    backproject_pixels,
    backproject_ray,
    fit_plane,
    plane_depth,
    plane_normal,
    point_from_depth,
    project_point,
    project_points,
    range_to_zdepth,
    ray_grid,
    ray_plane_depth,
    ray_plane_depth_many,
    zdepth_to_range,
)

CAM = CameraIntrinsics(fx=120.0, fy=115.0, cx=31.5, cy=23.5, skew=0.7)


def test_intrinsics_matrix_inverse():
    k = CAM.matrix()
    kinv = CAM.inverse_matrix()
    assert np.allclose(k @ kinv, np.eye(3), atol=1e-14)
    assert np.allclose(kinv @ k, np.eye(3), atol=1e-14)


def test_intrinsics_validation():
    with pytest.raises(ConfigurationError):
        CameraIntrinsics(fx=-1.0, fy=1.0, cx=0.0, cy=0.0)
    with pytest.raises(ConfigurationError):
        CameraIntrinsics(fx=1.0, fy=0.0, cx=0.0, cy=0.0)
    with pytest.raises(ConfigurationError):
        CameraIntrinsics(fx=1.0, fy=1.0, cx=np.nan, cy=0.0)


def test_backproject_project_round_trip():
    rng = np.random.default_rng(3)
    pixels = rng.uniform([0, 0], [63, 47], size=(200, 2))
    rays = backproject_pixels(CAM, pixels)
    assert np.allclose(np.linalg.norm(rays, axis=1), 1.0, atol=1e-12)
    depths = rng.uniform(0.5, 20.0, size=200)
    points = rays * depths[:, None]
    back = project_points(CAM, points)
    assert np.allclose(back, pixels, atol=1e-9)


def test_single_pixel_helpers_match_batch():
    ray = backproject_ray(CAM, (10.0, 20.0))
    assert np.allclose(ray.direction,
                       backproject_pixels(CAM, np.array([[10.0, 20.0]]))[0])
    pt = point_from_depth(2.5, ray)
    assert np.allclose(project_point(CAM, pt), [10.0, 20.0], atol=1e-10)


def test_ray_grid_center_pixel_points_forward():
    cam = CameraIntrinsics(fx=100.0, fy=100.0, cx=3.0, cy=2.0)
    grid = ray_grid(cam, 7, 5)
    assert grid.shape == (5, 7, 3)
    assert np.allclose(grid[2, 3], [0.0, 0.0, 1.0], atol=1e-12)
    assert np.allclose(np.linalg.norm(grid, axis=2), 1.0, atol=1e-12)
    with pytest.raises(DomainError):
        ray_grid(cam, 0, 5)


def test_project_rejects_nonpositive_z():
    with pytest.raises(DomainError):
        project_points(CAM, np.array([[0.0, 0.0, -1.0]]))
    with pytest.raises(DomainError):
        project_points(CAM, np.array([[0.0, 0.0, 0.0]]))


def test_unit_ray_and_point_validation():
    with pytest.raises(DomainError):
        UnitRay(np.array([0.0, 0.0, 2.0]))
    with pytest.raises(DomainError):
        UnitRay(np.array([0.0, 0.0, -1.0]))
    with pytest.raises(DomainError):
        Point3(np.array([0.0, np.inf, 1.0]))
    with pytest.raises(DomainError):
        PlaneParams(np.array([0.0, 0.0, 1.0]), -2.0)
    with pytest.raises(DomainError):
        PlaneParams(np.array([0.0, 0.0, 2.0]), 1.0)


def test_fit_plane_recovers_known_plane():
    rng = np.random.default_rng(11)
    normal = np.array([0.2, -0.3, 0.93])
    normal /= np.linalg.norm(normal)
    d = 2.7
    for _ in range(50):
        # three points on the plane n.x = d, built from in-plane tangents
        t1 = np.cross(normal, [1.0, 0.0, 0.0])
        t1 /= np.linalg.norm(t1)
        t2 = np.cross(normal, t1)
        coeffs = rng.uniform(-1.0, 1.0, size=(3, 2))
        pts = d * normal + coeffs @ np.stack([t1, t2])
        plane = fit_plane(Point3(pts[0]), Point3(pts[1]), Point3(pts[2]))
        assert np.allclose(np.abs(plane.normal @ normal), 1.0, atol=1e-9)
        assert plane.plane_depth == pytest.approx(d, abs=1e-9)
        # the orientation convention keeps the camera-facing sign
        assert plane.normal @ pts[0] > 0


def test_plane_normal_rejects_collinear_points():
    a = Point3(np.array([0.0, 0.0, 2.0]))
    b = Point3(np.array([1.0, 0.0, 2.0]))
    c = Point3(np.array([2.0, 0.0, 2.0]))
    with pytest.raises(DegenerateTripleError):
        plane_normal(a, b, c)


def test_plane_depth_definition():
    n = np.array([0.0, 0.0, 1.0])
    assert plane_depth(n, Point3(np.array([5.0, -3.0, 4.0]))) == 4.0


def test_ray_plane_depth_analytic():
    plane = PlaneParams(np.array([0.0, 0.0, 1.0]), 3.0)
    ray = backproject_ray(CAM, (31.5, 23.5))  # optical axis modulo skew
    lam = ray_plane_depth(plane, ray)
    # the intersection point must satisfy the plane equation
    assert (lam * ray.direction)[2] == pytest.approx(3.0, abs=1e-12)


def test_ray_plane_depth_grazing_and_behind():
    ray = UnitRay(np.array([0.0, 0.0, 1.0]))
    sideways = PlaneParams(np.array([1.0, 0.0, 0.0]), 1.0)
    with pytest.raises(GrazingRayError):
        ray_plane_depth(sideways, ray)
    tilted = np.array([1.0, 0.0, -0.1])
    tilted /= np.linalg.norm(tilted)
    behind = PlaneParams(tilted, 1.0)  # n.e < 0 puts the hit at negative range
    with pytest.raises(BehindCameraError):
        ray_plane_depth(behind, ray)


def test_ray_plane_depth_many_matches_scalar():
    rng = np.random.default_rng(5)
    pixels = rng.uniform([0, 0], [63, 47], size=(40, 2))
    rays = backproject_pixels(CAM, pixels)
    normals = rng.normal(size=(40, 3))
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    normals[normals[:, 2] < 0] *= -1.0
    depths = rng.uniform(0.5, 4.0, size=40)
    lam, ok = ray_plane_depth_many(normals, depths, rays)
    for i in range(40):
        plane = PlaneParams(normals[i], depths[i])
        try:
            expected = ray_plane_depth(plane, UnitRay(rays[i]))
        except (GrazingRayError, BehindCameraError):
            assert not ok[i]
            assert np.isnan(lam[i])
            continue
        assert ok[i]
        assert lam[i] == pytest.approx(expected, rel=1e-12)


def test_ray_plane_depth_many_flags_grazing_rows():
    rays = np.array([[0.0, 0.0, 1.0], [0.0, 0.0, 1.0]])
    normals = np.array([[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    lam, ok = ray_plane_depth_many(normals, np.array([1.0, 2.0]), rays)
    assert not ok[0] and np.isnan(lam[0])
    assert ok[1] and lam[1] == 2.0


def test_depth_convention_round_trip():
    rng = np.random.default_rng(9)
    grid = ray_grid(CAM, 16, 12)
    ranges = rng.uniform(0.5, 9.0, size=(12, 16))
    z = range_to_zdepth(ranges, grid[..., 2])
    back = zdepth_to_range(z, grid[..., 2])
    assert np.allclose(back, ranges, rtol=1e-14)
    assert np.all(z < ranges + 1e-12)  # e_z <= 1 shrinks range into z
    with pytest.raises(DomainError):
        zdepth_to_range(np.ones(3), np.array([1.0, 0.0, 0.5]))
