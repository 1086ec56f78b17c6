"""Tests for the procedural scene generator."""

import numpy as np
import pytest

from arapdepth import (
    DomainError,
    ParseError,
    SceneSpec,
    generate_scene,
    project_points,
    ray_grid,
    scene_spec_from_file,
)


def test_default_spec_is_valid():
    SceneSpec().validate()


@pytest.mark.parametrize("kwargs", [
    {"width": 4},
    {"height": 7},
    {"frames": 1},
    {"fx": 0.0},
    {"bg_depth": -1.0},
    {"object_lift": 0.0},
    {"object_lift": 3.0},  # equals bg_depth: nothing between camera and wall
    {"texture_cells": 1},
])
def test_spec_validation_rejects_bad_values(kwargs):
    with pytest.raises(DomainError):
        SceneSpec(**kwargs).validate()


def test_intrinsics_sit_at_the_image_center():
    spec = SceneSpec(width=64, height=48)
    cam = spec.intrinsics()
    assert cam.cx == (64 - 1) / 2.0
    assert cam.cy == (48 - 1) / 2.0
    assert cam.fx == cam.fy == 130.0
    assert cam.skew == 0.0


def test_scene_counts_and_shapes(small_scene):
    spec = small_scene.spec
    assert len(small_scene.images) == spec.frames
    assert len(small_scene.depths) == spec.frames
    assert len(small_scene.flows) == spec.frames - 1
    assert len(small_scene.moved_points) == spec.frames - 1
    for img in small_scene.images:
        assert img.pixels.shape == (spec.height, spec.width, 3)
        assert img.pixels.min() >= 0.0 and img.pixels.max() <= 1.0
    for dm in small_scene.depths:
        assert dm.values.shape == (spec.height, spec.width)
    for mp in small_scene.moved_points:
        assert mp.shape == (spec.height, spec.width, 3)


def test_depths_are_fully_valid_and_positive(small_scene):
    for dm in small_scene.depths:
        assert dm.valid.all()
        assert np.isfinite(dm.values).all()
        assert dm.values.min() > 0


def test_background_depth_at_the_center_pixel():
    spec = SceneSpec(width=64, height=48)
    scene = generate_scene(spec)
    # the image center ray is [0, 0, 1]; the background plane passes through
    # (0, 0, bg_depth), so the range there is bg_depth regardless of tilt
    center = scene.depths[0].values[(spec.height - 1) // 2 + 1,
                                    (spec.width - 1) // 2 + 1]
    # the exact center falls between pixels for even sizes; both neighbors
    # sit on the background within a couple of pixels of slope
    assert center == pytest.approx(spec.bg_depth, abs=0.01)


def test_objects_sit_in_front_of_the_background():
    spec = SceneSpec(width=64, height=48, object_lift=0.8)
    scene = generate_scene(spec)
    d = scene.depths[0].values
    assert d.min() < spec.bg_depth - 0.4
    assert d.max() > spec.bg_depth - 0.2


def test_texture_has_contrast(small_scene):
    assert small_scene.images[0].pixels.std() > 0.05


def test_flow_matches_projected_moved_points(small_scene):
    spec = small_scene.spec
    cam = small_scene.intrinsics
    flow = small_scene.flows[0]
    moved = small_scene.moved_points[0]
    rng = np.random.default_rng(3)
    vs = rng.integers(0, spec.height, size=20)
    us = rng.integers(0, spec.width, size=20)
    px = project_points(cam, moved[vs, us])
    assert np.allclose(flow.u[vs, us], px[:, 0] - us, atol=1e-12)
    assert np.allclose(flow.v[vs, us], px[:, 1] - vs, atol=1e-12)


def test_moved_points_match_next_frame_depths(small_scene):
    # away from depth discontinuities, the range of the moved point matches
    # the next frame's depth map sampled bilinearly at the landing position
    cam = small_scene.intrinsics
    moved = small_scene.moved_points[0]
    d1 = small_scene.depths[1].values
    h, w = d1.shape
    px = project_points(cam, moved.reshape(-1, 3)).reshape(h, w, 2)
    x, y = px[..., 0], px[..., 1]
    x0 = np.clip(np.floor(x).astype(int), 0, w - 2)
    y0 = np.clip(np.floor(y).astype(int), 0, h - 2)
    inside = (x >= 0) & (x <= w - 1) & (y >= 0) & (y <= h - 1)
    corners = np.stack([d1[y0, x0], d1[y0, x0 + 1],
                        d1[y0 + 1, x0], d1[y0 + 1, x0 + 1]])
    smooth = np.ptp(corners, axis=0) < 0.05
    fx, fy = x - x0, y - y0
    interp = (corners[0] * (1 - fx) * (1 - fy) + corners[1] * fx * (1 - fy)
              + corners[2] * (1 - fx) * fy + corners[3] * fx * fy)
    sel = inside & smooth
    assert sel.sum() > 0.5 * h * w
    rng_moved = np.linalg.norm(moved[sel], axis=1)
    assert np.allclose(rng_moved, interp[sel], atol=0.01)


def test_rigid_scene_preserves_pairwise_distances():
    spec = SceneSpec(width=64, height=48, frames=3, amplitude=0.0)
    scene = generate_scene(spec)
    rays = ray_grid(spec.intrinsics(), spec.width, spec.height)
    rng = np.random.default_rng(0)
    a = (rng.integers(0, spec.height, 40), rng.integers(0, spec.width, 40))
    b = (rng.integers(0, spec.height, 40), rng.integers(0, spec.width, 40))
    # moved_points[t] carries frame t's pixels one frame forward
    for t, moved in enumerate(scene.moved_points):
        hits = scene.depths[t].values[..., None] * rays
        before = np.linalg.norm(hits[a] - hits[b], axis=1)
        after = np.linalg.norm(moved[a] - moved[b], axis=1)
        assert np.allclose(before, after, atol=1e-9)


def test_deforming_scene_breaks_distances():
    spec = SceneSpec(width=64, height=48, amplitude=1.0)
    scene = generate_scene(spec)
    rays = ray_grid(spec.intrinsics(), spec.width, spec.height)
    hits = scene.depths[0].values[..., None] * rays
    moved = scene.moved_points[0]
    # compare an object pixel against a background corner
    obj = np.unravel_index(np.argmin(scene.depths[0].values), hits.shape[:2])
    corner = (0, 0)
    before = np.linalg.norm(hits[obj] - hits[corner])
    after = np.linalg.norm(moved[obj] - moved[corner])
    assert abs(before - after) > 1e-3


def test_flow_residual_zero_for_two_frames():
    scene = generate_scene(SceneSpec(width=48, height=32, frames=2))
    assert scene.flow_residual_px == 0.0


def test_flow_residual_tiny_for_longer_sequences(small_scene):
    assert small_scene.spec.frames >= 3
    assert small_scene.flow_residual_px < 1e-9


def test_generation_is_deterministic():
    spec = SceneSpec(width=48, height=32, frames=3, amplitude=0.7)
    s1 = generate_scene(spec)
    s2 = generate_scene(spec)
    for a, b in zip(s1.images, s2.images):
        assert np.array_equal(a.pixels, b.pixels)
    for a, b in zip(s1.depths, s2.depths):
        assert np.array_equal(a.values, b.values)
    for a, b in zip(s1.flows, s2.flows):
        assert np.array_equal(a.u, b.u) and np.array_equal(a.v, b.v)


def test_texture_seed_changes_the_image():
    base = generate_scene(SceneSpec(width=48, height=32))
    other = generate_scene(SceneSpec(width=48, height=32, seed=5))
    assert not np.array_equal(base.images[0].pixels, other.images[0].pixels)


# ---------------------------------------------------------------------------
# Spec files
# ---------------------------------------------------------------------------

def test_scene_spec_file_round_trip(tmp_path):
    path = tmp_path / "scene.txt"
    path.write_text(
        "# comment line\n"
        "\n"
        "width = 96\n"
        "height=72\n"
        "frames = 4\n"
        "amplitude = 0.5\n"
        "trans_z = 0.01\n"
    )
    spec = scene_spec_from_file(path)
    assert spec.width == 96
    assert spec.height == 72
    assert spec.frames == 4
    assert spec.amplitude == 0.5
    assert spec.trans_z == 0.01
    assert spec.bg_depth == 3.0  # untouched default


def test_scene_spec_file_rejects_unknown_key(tmp_path):
    path = tmp_path / "scene.txt"
    path.write_text("width = 96\nwobble = 3\n")
    with pytest.raises(ParseError) as err:
        scene_spec_from_file(path)
    assert "wobble" in str(err.value)
    assert err.value.offset == len("width = 96\n")


def test_scene_spec_file_rejects_bad_value(tmp_path):
    path = tmp_path / "scene.txt"
    path.write_text("width = ninety\n")
    with pytest.raises(ParseError):
        scene_spec_from_file(path)


def test_scene_spec_file_rejects_non_assignment(tmp_path):
    path = tmp_path / "scene.txt"
    path.write_text("width: 96\n")
    with pytest.raises(ParseError):
        scene_spec_from_file(path)


def test_scene_spec_file_missing_raises_oserror(tmp_path):
    with pytest.raises(OSError):
        scene_spec_from_file(tmp_path / "nope.txt")
