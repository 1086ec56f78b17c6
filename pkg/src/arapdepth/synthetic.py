"""Synthetic test scenes with exact ground-truth depth and flow.

A scene is a textured background plane plus two triangle-mesh objects
floating in front of it. Every frame applies a global rigid motion (rotation
about the camera center plus a translation) to the whole scene; on top of
that each object deforms by a smooth, sinusoidal per-vertex displacement
scaled by ``amplitude``. With ``amplitude = 0`` the entire scene moves as
one rigid body, which gives closed-form expectations for rigidity-preserving
algorithms.

Depth is computed by exact ray casting (ray/plane and ray/triangle
intersection) and flow by moving each pixel's hit point with its surface
into the next frame, so both are accurate to floating-point roundoff. The
generator carries its own consistency check: each hit point is advanced to
the next frame by two algebraically equal but differently composed paths,
and the largest projected disagreement is reported in pixels.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .datatypes import DepthMap, FlowField, Image
from .errors import DomainError
from .geometry import CameraIntrinsics, ray_grid

BARYCENTRIC_TOL = 1e-12


@dataclass(frozen=True)
class SceneSpec:
    """Scalar knobs of the generator; everything else is fixed geometry."""

    width: int = 160
    height: int = 120
    frames: int = 2
    fx: float = 130.0
    fy: float = 130.0
    amplitude: float = 0.0
    rot_degrees: float = 1.2
    trans_x: float = 0.004
    trans_y: float = -0.002
    trans_z: float = 0.03
    bg_depth: float = 3.0
    object_lift: float = 0.8
    texture_cells: int = 6
    seed: int = 0

    def validate(self):
        if self.width < 8 or self.height < 8:
            raise DomainError("scene must be at least 8x8 pixels")
        if self.frames < 2:
            raise DomainError("scene needs at least 2 frames")
        if self.fx <= 0 or self.fy <= 0:
            raise DomainError("focal lengths must be positive")
        if self.bg_depth <= 0:
            raise DomainError("background depth must be positive")
        if not 0 < self.object_lift < self.bg_depth:
            raise DomainError(
                "object lift must sit between the camera and the background")
        if self.texture_cells < 2:
            raise DomainError("texture needs at least 2 cells per side")

    def intrinsics(self) -> CameraIntrinsics:
        return CameraIntrinsics(self.fx, self.fy,
                                (self.width - 1) / 2.0,
                                (self.height - 1) / 2.0)


@dataclass
class SyntheticScene:
    spec: SceneSpec
    intrinsics: CameraIntrinsics
    images: list
    depths: list
    flows: list
    moved_points: list
    flow_residual_px: float


# Rest-pose geometry. The rotation axis is fixed; per-object oscillation
# directions and frequencies are chosen so no two vertices move identically.
# Object rest planes are parallel to the background plane so that at zero
# amplitude the orientation-smoothness prior is already minimal at ground
# truth; nonzero amplitude tilts the mesh triangles individually.
_ROT_AXIS = np.array([0.15, 0.80, 0.55])
# Background plane normal direction (unnormalized). Meshes store tilt as
# z-slopes (dz/dx, dz/dy), whose plane normal is (-slope_x, -slope_y, 1).
_BG_NORMAL = np.array([0.06, -0.04, 1.0])
_OBJ_TILT = (-_BG_NORMAL[0], -_BG_NORMAL[1])
_OBJECTS = (
    {
        "center_xy": np.array([-0.45, -0.18]),
        "lift_frac": 1.0,
        "half_size": (0.42, 0.30),
        "tilt": _OBJ_TILT,
        "color": np.array([0.88, 0.26, 0.20]),
        "swing_dir": np.array([0.6, 0.25, 0.75]),
        "swing_freq": 1.0,
        "swing_phase": 0.3,
        "wobble_freq": 1.7,
        "wobble_phase": 1.1,
    },
    {
        "center_xy": np.array([0.55, 0.30]),
        "lift_frac": 0.6,
        "half_size": (0.38, 0.34),
        "tilt": _OBJ_TILT,
        "color": np.array([0.18, 0.34, 0.92]),
        "swing_dir": np.array([-0.5, 0.7, 0.5]),
        "swing_freq": 0.8,
        "swing_phase": 1.9,
        "wobble_freq": 2.3,
        "wobble_phase": 0.5,
    },
)
_MESH_DIV = 2  # each object is a (_MESH_DIV+1)^2 vertex grid


def _rotation_matrix(axis: np.ndarray, degrees: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    theta = np.deg2rad(degrees)
    k = np.array([[0.0, -axis[2], axis[1]],
                  [axis[2], 0.0, -axis[0]],
                  [-axis[1], axis[0], 0.0]])
    return np.eye(3) + np.sin(theta) * k + (1.0 - np.cos(theta)) * (k @ k)


def _global_motion(spec: SceneSpec, t: float):
    """Rigid map applied to the whole scene at frame index t."""
    rot = _rotation_matrix(_ROT_AXIS, spec.rot_degrees * t)
    trans = t * np.array([spec.trans_x, spec.trans_y, spec.trans_z])
    return rot, trans


def _rest_mesh(spec: SceneSpec, obj: dict):
    """Vertex grid and triangle index list of one object at rest.

    The object plane floats ``object_lift * lift_frac`` in front of the
    background plane (measured along z through the object center), parallel
    to it.
    """
    hx, hy = obj["half_size"]
    tx, ty = obj["tilt"]
    x0, y0 = obj["center_xy"]
    n_bg, p_bg = _rest_plane(spec)
    z_bg = (n_bg @ p_bg - n_bg[0] * x0 - n_bg[1] * y0) / n_bg[2]
    z0 = z_bg - spec.object_lift * obj["lift_frac"]
    n = _MESH_DIV + 1
    us = np.linspace(-1.0, 1.0, n)
    gu, gv = np.meshgrid(us, us, indexing="xy")
    verts = np.empty((n * n, 3))
    verts[:, 0] = x0 + hx * gu.ravel()
    verts[:, 1] = y0 + hy * gv.ravel()
    verts[:, 2] = z0 + tx * hx * gu.ravel() + ty * hy * gv.ravel()
    tris = []
    for r in range(_MESH_DIV):
        for c in range(_MESH_DIV):
            a = r * n + c
            tris.append((a, a + 1, a + n))
            tris.append((a + 1, a + n + 1, a + n))
    return verts, np.array(tris, dtype=np.int64)


def _deformed_vertices(spec: SceneSpec, obj: dict, rest: np.ndarray,
                       t: float) -> np.ndarray:
    """Rest vertices displaced by the amplitude-scaled sinusoidal field."""
    swing = np.sin(obj["swing_freq"] * t + obj["swing_phase"])
    disp = 0.12 * swing * (obj["swing_dir"] / np.linalg.norm(obj["swing_dir"]))
    idx = np.arange(len(rest))
    wob = np.sin(obj["wobble_freq"] * t + obj["wobble_phase"] + 0.9 * idx)
    local = np.zeros_like(rest)
    local[:, 2] = 0.08 * wob
    moved = rest + spec.amplitude * (disp[None, :] + local)
    rot, trans = _global_motion(spec, t)
    return moved @ rot.T + trans


def _rest_plane(spec: SceneSpec):
    """Background plane at rest: (unit normal, anchor point)."""
    n0 = _BG_NORMAL / np.linalg.norm(_BG_NORMAL)
    p0 = np.array([0.0, 0.0, spec.bg_depth])
    return n0, p0


def _plane_at(spec: SceneSpec, t: float):
    """Background plane (unit normal, offset) at frame index t."""
    n0, p0 = _rest_plane(spec)
    rot, trans = _global_motion(spec, t)
    n = rot @ n0
    p = rot @ p0 + trans
    return n, float(n @ p)


def _intersect_triangles(rays: np.ndarray, verts: np.ndarray,
                         tris: np.ndarray):
    """Closest ray/triangle hit per pixel for rays from the origin.

    Returns (range, triangle index or -1, barycentric (b1, b2)) arrays.
    """
    h, w = rays.shape[:2]
    best = np.full((h, w), np.inf)
    best_tri = np.full((h, w), -1, dtype=np.int64)
    best_b1 = np.zeros((h, w))
    best_b2 = np.zeros((h, w))
    d = rays.reshape(-1, 3)
    for ti, (i0, i1, i2) in enumerate(tris):
        v0, e1, e2 = verts[i0], verts[i1] - verts[i0], verts[i2] - verts[i0]
        pvec = np.cross(d, e2)
        det = pvec @ e1
        ok = np.abs(det) > 1e-14
        inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
        tvec = -v0
        b1 = (pvec @ tvec) * inv
        qvec = np.cross(tvec, e1)
        b2 = (d @ qvec) * inv
        lam = (e2 @ qvec) * inv
        hit = (ok & (b1 >= -BARYCENTRIC_TOL) & (b2 >= -BARYCENTRIC_TOL)
               & (b1 + b2 <= 1.0 + BARYCENTRIC_TOL) & (lam > 0))
        lam = np.where(hit, lam, np.inf).reshape(h, w)
        closer = lam < best
        best = np.where(closer, lam, best)
        best_tri = np.where(closer, ti, best_tri)
        best_b1 = np.where(closer, b1.reshape(h, w), best_b1)
        best_b2 = np.where(closer, b2.reshape(h, w), best_b2)
    return best, best_tri, best_b1, best_b2


def _texture(spec: SceneSpec) -> np.ndarray:
    """Smooth random RGB texture for the background plane."""
    rng = np.random.default_rng(spec.seed)
    cells = rng.uniform(0.10, 0.55, size=(spec.texture_cells,
                                          spec.texture_cells, 3))
    return cells


def _sample_texture(cells: np.ndarray, uu: np.ndarray,
                    vv: np.ndarray) -> np.ndarray:
    """Bilinear lookup of plane coordinates (uu, vv) into the cell grid."""
    n = cells.shape[0]
    span = 2.4  # plane-coordinate window mapped across the texture
    su = np.clip((uu / span + 0.5) * (n - 1), 0.0, n - 1 - 1e-9)
    sv = np.clip((vv / span + 0.5) * (n - 1), 0.0, n - 1 - 1e-9)
    i0 = np.floor(su).astype(np.int64)
    j0 = np.floor(sv).astype(np.int64)
    fu = (su - i0)[..., None]
    fv = (sv - j0)[..., None]
    c00 = cells[j0, i0]
    c10 = cells[j0, i0 + 1]
    c01 = cells[j0 + 1, i0]
    c11 = cells[j0 + 1, i0 + 1]
    return (c00 * (1 - fu) * (1 - fv) + c10 * fu * (1 - fv)
            + c01 * (1 - fu) * fv + c11 * fu * fv)


def generate_scene(spec: SceneSpec = None) -> SyntheticScene:
    """Render images, exact depth maps, and exact flow fields per frame."""
    if spec is None:
        spec = SceneSpec()
    spec.validate()
    intr = spec.intrinsics()
    rays = ray_grid(intr, spec.width, spec.height)
    h, w = spec.height, spec.width
    cells = _texture(spec)

    meshes = [_rest_mesh(spec, obj) for obj in _OBJECTS]
    # Rest-plane orthonormal basis for stable texture coordinates.
    n0, p0 = _rest_plane(spec)
    bu = np.cross(np.array([0.0, 1.0, 0.0]), n0)
    bu = bu / np.linalg.norm(bu)
    bv = np.cross(n0, bu)

    images, depths, flows, moved_all = [], [], [], []
    residual = 0.0

    frame_verts = [
        [_deformed_vertices(spec, obj, meshes[k][0], float(t))
         for k, obj in enumerate(_OBJECTS)]
        for t in range(spec.frames)
    ]

    for t in range(spec.frames):
        rot, trans = _global_motion(spec, float(t))
        n_t, d_t = _plane_at(spec, float(t))
        denom = rays @ n_t
        lam_bg = np.where(np.abs(denom) > 1e-12, d_t / denom, np.inf)
        lam_bg = np.where(lam_bg > 0, lam_bg, np.inf)

        best = lam_bg.copy()
        which = np.full((h, w), -1, dtype=np.int64)  # -1 background, else object
        tri_id = np.full((h, w), -1, dtype=np.int64)
        bary1 = np.zeros((h, w))
        bary2 = np.zeros((h, w))
        for k, (rest, tris) in enumerate(meshes):
            lam, tr, b1, b2 = _intersect_triangles(rays, frame_verts[t][k], tris)
            closer = lam < best
            best = np.where(closer, lam, best)
            which = np.where(closer, k, which)
            tri_id = np.where(closer, tr, tri_id)
            bary1 = np.where(closer, b1, bary1)
            bary2 = np.where(closer, b2, bary2)

        if not np.isfinite(best).all():
            raise DomainError("a pixel ray missed every scene surface")

        hits = rays * best[..., None]
        image = np.empty((h, w, 3))
        bg_mask = which < 0
        rest_pts = (hits[bg_mask] - trans) @ rot  # inverse rigid map
        uu = (rest_pts - p0) @ bu
        vv = (rest_pts - p0) @ bv
        image[bg_mask] = _sample_texture(cells, uu, vv)
        for k, obj in enumerate(_OBJECTS):
            m = which == k
            shade = 1.0 - 0.04 * (tri_id[m] % 3)
            image[m] = obj["color"][None, :] * shade[:, None]

        images.append(Image(image))
        depths.append(DepthMap(best))

        if t + 1 >= spec.frames:
            break

        rot1, trans1 = _global_motion(spec, float(t + 1))
        moved = np.empty((h, w, 3))
        # Background: pull the hit back to rest, push to frame t+1.
        moved[bg_mask] = rest_pts @ rot1.T + trans1
        # Second path: one relative rigid step applied directly to the hit.
        rel_rot = rot1 @ rot.T
        rel_trans = trans1 - rel_rot @ trans
        alt = hits[bg_mask] @ rel_rot.T + rel_trans
        for k, (rest, tris) in enumerate(meshes):
            m = which == k
            ids = tri_id[m]
            v_next = frame_verts[t + 1][k]
            i0, i1, i2 = tris[ids, 0], tris[ids, 1], tris[ids, 2]
            b1 = bary1[m][:, None]
            b2 = bary2[m][:, None]
            moved[m] = (v_next[i0] * (1.0 - b1 - b2)
                        + v_next[i1] * b1 + v_next[i2] * b2)

        if moved[..., 2].min() <= 0:
            raise DomainError("scene motion pushed a surface behind the camera")

        us, vs = np.meshgrid(np.arange(w, dtype=float),
                             np.arange(h, dtype=float), indexing="xy")
        px = intr.fx * moved[..., 0] / moved[..., 2] \
            + intr.skew * moved[..., 1] / moved[..., 2] + intr.cx
        py = intr.fy * moved[..., 1] / moved[..., 2] + intr.cy
        flows.append(FlowField(px - us, py - vs))
        moved_all.append(moved)

        alt_px = intr.fx * alt[:, 0] / alt[:, 2] \
            + intr.skew * alt[:, 1] / alt[:, 2] + intr.cx
        alt_py = intr.fy * alt[:, 1] / alt[:, 2] + intr.cy
        res = np.hypot(alt_px - px[bg_mask], alt_py - py[bg_mask])
        if res.size:
            residual = max(residual, float(res.max()))

    return SyntheticScene(spec, intr, images, depths, flows, moved_all,
                          residual)


def scene_spec_from_file(path) -> SceneSpec:
    """Parse ``key=value`` lines into a SceneSpec (unknown keys rejected)."""
    types = {f.name: f.type for f in fields(SceneSpec)}
    defaults = SceneSpec()
    values = {}
    from .errors import ParseError
    with open(path, "r", encoding="utf-8") as fh:
        offset = 0
        for line_no, raw in enumerate(fh, start=1):
            line = raw.strip()
            start = offset
            offset += len(raw.encode("utf-8"))
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ParseError(f"line {line_no} is not key=value",
                                 path=str(path), offset=start)
            key, _, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if key not in types:
                raise ParseError(f"unknown scene key {key!r}",
                                 path=str(path), offset=start)
            kind = type(getattr(defaults, key))
            try:
                values[key] = kind(value)
            except ValueError as exc:
                raise ParseError(f"bad value for {key!r}: {value!r}",
                                 path=str(path), offset=start) from exc
    return SceneSpec(**values)
