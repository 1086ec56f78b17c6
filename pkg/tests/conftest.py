"""Shared fixtures: synthetic scenes and pipeline runs reused across files.

The expensive propagation runs are session-scoped so the acceptance checks
and the pipeline unit tests share one computation.
"""

import time

import pytest

from arapdepth import (
    RunConfig,
    SceneFrame,
    SceneSpec,
    generate_scene,
    prepare_step,
    propagate_depth,
    sparse_prior_from_triples,
)


@pytest.fixture(scope="session")
def small_scene():
    """64x48 rigid scene (amplitude 0), 3 frames; cheap enough for unit tests."""
    return generate_scene(SceneSpec(width=64, height=48, frames=3,
                                    amplitude=0.0, object_lift=0.3))


@pytest.fixture(scope="session")
def small_config():
    return RunConfig(superpixels=60, knn=8, compactness=0.1,
                     max_iterations=600, moves=2, particles_per_move=4)


@pytest.fixture(scope="session")
def small_result(small_scene, small_config):
    ref = SceneFrame(small_scene.images[0], small_scene.intrinsics,
                     small_scene.depths[0])
    return propagate_depth(ref, small_scene.images[1], small_scene.flows[0],
                           small_config)


@pytest.fixture(scope="session")
def rigid_scene():
    """160x120 rigid scene. The shallow object lift keeps the cost of the
    forward splat's inherent silhouette mislabeling small, so the result
    isolates solver and model error."""
    return generate_scene(SceneSpec(amplitude=0.0, object_lift=0.15))


@pytest.fixture(scope="session")
def rigid_config():
    return RunConfig(superpixels=150, knn=10, compactness=0.1,
                     max_iterations=3000)


@pytest.fixture(scope="session")
def rigid_run(rigid_scene, rigid_config):
    """Propagate the rigid scene from a sparse (3 points/superpixel) prior.

    Returns the prepared problem, the sparse prior, the pipeline result and
    the wall time of the whole run (prior construction included).
    """
    scene = rigid_scene
    start = time.perf_counter()
    dense = SceneFrame(scene.images[0], scene.intrinsics, scene.depths[0])
    prep_dense = prepare_step(dense, scene.flows[0], rigid_config)
    prior = sparse_prior_from_triples(scene.depths[0], prep_dense.triples)
    ref = SceneFrame(scene.images[0], scene.intrinsics, prior)
    prep = prepare_step(ref, scene.flows[0], rigid_config)
    result = propagate_depth(ref, scene.images[1], scene.flows[0],
                             rigid_config)
    wall = time.perf_counter() - start
    return {"ref": ref, "prior": prior, "prep": prep, "result": result,
            "wall": wall}


@pytest.fixture(scope="session")
def deform_scene():
    """160x120 scene at full deformation amplitude, default object lift."""
    return generate_scene(SceneSpec(amplitude=1.0))


@pytest.fixture(scope="session")
def deform_run(deform_scene, rigid_config):
    scene = deform_scene
    ref = SceneFrame(scene.images[0], scene.intrinsics, scene.depths[0])
    return propagate_depth(ref, scene.images[1], scene.flows[0], rigid_config)
