"""Pinhole camera geometry: rays, 3D points and scene planes.

Conventions used throughout the package:

* pixel coordinates are (u, v) = (column, row), origin at the top-left pixel
  center, so image arrays are indexed ``[v, u]``;
* "depth" means range along the pixel's unit viewing ray (the 3D point is
  ``depth * ray``); z-depth only appears at file I/O boundaries;
* planes are stored as a unit normal n and scalar plane_depth d with the
  plane equation ``n . x = d``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (
    BehindCameraError,
    ConfigurationError,
    DegenerateTripleError,
    DomainError,
    GrazingRayError,
)

# Tolerances; these are part of the numeric contract and tests rely on them.
UNIT_NORM_TOL = 1e-12
COLLINEARITY_TOL = 1e-8
GRAZING_TOL = 1e-6


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics (fx, fy, cx, cy, optional skew)."""

    fx: float
    fy: float
    cx: float
    cy: float
    skew: float = 0.0

    def __post_init__(self):
        if not (np.isfinite(self.fx) and self.fx > 0):
            raise ConfigurationError(f"fx must be finite and > 0, got {self.fx}")
        if not (np.isfinite(self.fy) and self.fy > 0):
            raise ConfigurationError(f"fy must be finite and > 0, got {self.fy}")
        for name in ("cx", "cy", "skew"):
            if not np.isfinite(getattr(self, name)):
                raise ConfigurationError(f"{name} must be finite")

    def matrix(self) -> np.ndarray:
        """3x3 calibration matrix K. Always invertible since fx, fy > 0."""
        return np.array(
            [
                [self.fx, self.skew, self.cx],
                [0.0, self.fy, self.cy],
                [0.0, 0.0, 1.0],
            ]
        )

    def inverse_matrix(self) -> np.ndarray:
        """Closed-form K^-1 (upper triangular)."""
        return np.array(
            [
                [1.0 / self.fx, -self.skew / (self.fx * self.fy),
                 (self.skew * self.cy - self.cx * self.fy) / (self.fx * self.fy)],
                [0.0, 1.0 / self.fy, -self.cy / self.fy],
                [0.0, 0.0, 1.0],
            ]
        )


def _readonly(a: np.ndarray) -> np.ndarray:
    out = np.array(a, dtype=np.float64, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class UnitRay:
    """A unit-norm viewing direction with positive z (in front of the camera)."""

    direction: np.ndarray

    def __post_init__(self):
        d = _readonly(self.direction)
        if d.shape != (3,):
            raise DomainError(f"ray direction must have shape (3,), got {d.shape}")
        n = float(np.linalg.norm(d))
        if abs(n - 1.0) > UNIT_NORM_TOL:
            raise DomainError(f"ray direction norm {n!r} deviates from 1")
        if d[2] <= 0:
            raise DomainError("ray must point in front of the camera (z > 0)")
        object.__setattr__(self, "direction", d)


@dataclass(frozen=True)
class Point3:
    """A finite 3D point in camera coordinates."""

    coordinates: np.ndarray

    def __post_init__(self):
        c = _readonly(self.coordinates)
        if c.shape != (3,):
            raise DomainError(f"point must have shape (3,), got {c.shape}")
        if not np.all(np.isfinite(c)):
            raise DomainError("point coordinates must be finite")
        object.__setattr__(self, "coordinates", c)


@dataclass(frozen=True)
class PlaneParams:
    """Plane n . x = plane_depth with unit normal and positive plane depth."""

    normal: np.ndarray
    plane_depth: float

    def __post_init__(self):
        n = _readonly(self.normal)
        if n.shape != (3,):
            raise DomainError(f"plane normal must have shape (3,), got {n.shape}")
        norm = float(np.linalg.norm(n))
        if abs(norm - 1.0) > UNIT_NORM_TOL:
            raise DomainError(f"plane normal norm {norm!r} deviates from 1")
        if not (np.isfinite(self.plane_depth) and self.plane_depth > 0):
            raise DomainError(
                f"plane depth must be finite and > 0, got {self.plane_depth}"
            )
        object.__setattr__(self, "normal", n)


# ---------------------------------------------------------------------------
# Back-projection and projection
# ---------------------------------------------------------------------------

def backproject_pixels(intrinsics: CameraIntrinsics, pixels: np.ndarray) -> np.ndarray:
    """Unit viewing rays for an (M, 2) array of (u, v) pixel coordinates.

    Vectorized workhorse behind :func:`backproject_ray`; returns (M, 3).
    """
    px = np.atleast_2d(np.asarray(pixels, dtype=np.float64))
    if px.ndim != 2 or px.shape[1] != 2:
        raise DomainError(f"pixels must have shape (M, 2), got {px.shape}")
    kinv = intrinsics.inverse_matrix()
    homo = np.column_stack([px, np.ones(len(px))])
    dirs = homo @ kinv.T
    norms = np.linalg.norm(dirs, axis=1, keepdims=True)
    return dirs / norms


def backproject_ray(intrinsics: CameraIntrinsics, pixel) -> UnitRay:
    """Unit ray through one pixel: normalize(K^-1 (u, v, 1))."""
    return UnitRay(backproject_pixels(intrinsics, np.asarray(pixel).reshape(1, 2))[0])


def ray_grid(intrinsics: CameraIntrinsics, width: int, height: int) -> np.ndarray:
    """(H, W, 3) array of unit rays for every pixel center of a grid."""
    if width < 1 or height < 1:
        raise DomainError("grid dimensions must be positive")
    u, v = np.meshgrid(np.arange(width, dtype=np.float64),
                       np.arange(height, dtype=np.float64))
    px = np.column_stack([u.ravel(), v.ravel()])
    return backproject_pixels(intrinsics, px).reshape(height, width, 3)


def project_points(intrinsics: CameraIntrinsics, points: np.ndarray) -> np.ndarray:
    """Pixel coordinates of (M, 3) camera-space points with positive z."""
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise DomainError(f"points must have shape (M, 3), got {pts.shape}")
    z = pts[:, 2]
    if np.any(z <= 0):
        raise DomainError("cannot project points with z <= 0")
    proj = pts @ intrinsics.matrix().T
    return proj[:, :2] / proj[:, 2:3]


def project_point(intrinsics: CameraIntrinsics, point: Point3) -> np.ndarray:
    """Pixel (u, v) of a single 3D point."""
    return project_points(intrinsics, point.coordinates.reshape(1, 3))[0]


def point_from_depth(depth: float, ray: UnitRay) -> Point3:
    """3D point at the given range along a viewing ray."""
    if not (np.isfinite(depth) and depth > 0):
        raise DomainError(f"depth must be finite and > 0, got {depth}")
    return Point3(depth * ray.direction)


# ---------------------------------------------------------------------------
# Planes
# ---------------------------------------------------------------------------

def plane_normal(x_a: Point3, x_1: Point3, x_2: Point3) -> np.ndarray:
    """Unit normal of the plane through three points.

    The normal is the normalized cross product of (x_a - x_1) and
    (x_a - x_2), with the sign fixed so that ``n . x_a > 0`` (the plane depth
    seen from the camera is positive). Raises DegenerateTripleError when the
    points are collinear within tolerance.
    """
    a = x_a.coordinates
    e1 = a - x_1.coordinates
    e2 = a - x_2.coordinates
    cross = np.cross(e1, e2)
    cnorm = float(np.linalg.norm(cross))
    scale = float(np.linalg.norm(e1) * np.linalg.norm(e2))
    if cnorm < COLLINEARITY_TOL * scale or cnorm == 0.0:
        raise DegenerateTripleError(
            f"collinear points: |cross| = {cnorm:.3e} below tolerance"
        )
    n = cross / cnorm
    if float(np.dot(n, a)) < 0:
        n = -n
    return n


def plane_depth(normal: np.ndarray, x_a: Point3) -> float:
    """Scalar plane depth d = n . x_a of the plane through x_a with normal n."""
    return float(np.dot(np.asarray(normal, dtype=np.float64), x_a.coordinates))


def fit_plane(x_a: Point3, x_1: Point3, x_2: Point3) -> PlaneParams:
    """Plane through three non-collinear points, oriented toward the camera."""
    n = plane_normal(x_a, x_1, x_2)
    return PlaneParams(n, plane_depth(n, x_a))


def ray_plane_depth(plane: PlaneParams, ray: UnitRay) -> float:
    """Range at which a viewing ray meets a plane: d / (n . e).

    Raises GrazingRayError when |n . e| <= 1e-6 (near-parallel) and
    BehindCameraError when the intersection has non-positive depth.
    """
    denom = float(np.dot(plane.normal, ray.direction))
    if abs(denom) <= GRAZING_TOL:
        raise GrazingRayError(f"|n . e| = {abs(denom):.3e} at/below tolerance")
    lam = plane.plane_depth / denom
    if lam <= 0:
        raise BehindCameraError(f"ray meets plane at non-positive depth {lam:.3e}")
    return lam


def ray_plane_depth_many(normals: np.ndarray, depths: np.ndarray,
                         rays: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized ray/plane intersection used by the renderer and cost tables.

    ``normals``/``rays`` broadcast against each other on the leading axes
    (last axis 3); ``depths`` broadcasts against the result. Returns
    ``(ranges, valid)`` where invalid entries (grazing or non-positive range)
    hold NaN instead of raising.
    """
    denom = np.sum(np.asarray(normals, dtype=np.float64)
                   * np.asarray(rays, dtype=np.float64), axis=-1)
    depths = np.asarray(depths, dtype=np.float64)
    valid = np.abs(denom) > GRAZING_TOL
    with np.errstate(divide="ignore", invalid="ignore"):
        lam = np.where(valid, depths / np.where(valid, denom, 1.0), np.nan)
    valid = valid & (lam > 0)
    lam = np.where(valid, lam, np.nan)
    return lam, valid


# ---------------------------------------------------------------------------
# Depth conventions
# ---------------------------------------------------------------------------

def range_to_zdepth(range_depth, ray_z):
    """Convert range along the ray to z-depth: z = r * e_z.

    Accepts scalars or broadcastable arrays; ``ray_z`` is the z component of
    the unit ray(s).
    """
    return np.asarray(range_depth, dtype=np.float64) * np.asarray(ray_z, dtype=np.float64)


def zdepth_to_range(z_depth, ray_z):
    """Convert z-depth to range along the ray: r = z / e_z."""
    rz = np.asarray(ray_z, dtype=np.float64)
    if np.any(rz <= 0):
        raise DomainError("ray z components must be positive")
    return np.asarray(z_depth, dtype=np.float64) / rz
