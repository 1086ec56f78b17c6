"""End-to-end depth propagation from a reference frame to the next frame(s).

One propagation step:

1. segment the reference image into superpixels,
2. pick an anchor triple per superpixel (restricted to prior-valid pixels),
3. build the k-NN rigidity graph over anchors and expand it to points,
4. solve the as-rigid-as-possible energy for next-frame point depths,
5. fit a plane per superpixel through its three solved points,
6. transfer superpixel labels to the next-frame grid and render depth,
7. refine the planes with the particle TRW-S smoother and re-render.

Multi-frame propagation chains steps: the dense output of step t becomes the
prior of step t+1 (sampled at the new triple points by step 2).
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import arap, refine, segmentation
from .config import RunConfig, refine_config, solver_config
from .datatypes import DepthMap, FlowField, Image
from .errors import DegenerateSuperpixelError, DomainError, UnusablePriorError
from .geometry import CameraIntrinsics, backproject_pixels, ray_grid, ray_plane_depth_many

logger = logging.getLogger(__name__)


@dataclass
class SceneFrame:
    """One input frame: image, intrinsics, and (optionally) a depth prior."""

    image: Image
    intrinsics: CameraIntrinsics
    depth: DepthMap = None


@dataclass
class Diagnostics:
    """Bookkeeping emitted by one propagation step."""

    merged_superpixels: int = 0
    invalid_warped_points: int = 0
    dropped_edges: int = 0
    plane_fallbacks: list = field(default_factory=list)
    dropped_boundary_pairs: int = 0
    unlabeled_before_fill: int = 0
    render_invalid_pixels: int = 0
    mre_vs_ground_truth: float = None


@dataclass
class PipelineResult:
    next_depth: DepthMap
    prerefine_depth: DepthMap
    planes: list
    segmentation: segmentation.Segmentation
    triples: list
    labels_next: np.ndarray
    solve_report: arap.SolveReport
    refine_trace: refine.RefineTrace
    diagnostics: Diagnostics


# ---------------------------------------------------------------------------
# Label transfer and rendering
# ---------------------------------------------------------------------------

def transfer_labels(seg: segmentation.Segmentation, flow: FlowField,
                    next_width: int = None, next_height: int = None):
    """Forward-splat superpixel labels onto the next-frame grid.

    Each reference pixel with valid flow lands on the nearest integer pixel
    of its warped position; collisions keep the source with the smallest
    subpixel distance, exact ties the lower label id. Unlabeled pixels are
    filled breadth-first (4-connected) from the labeled set. Returns
    (labels (H', W'), unlabeled_before_fill).
    """
    if (seg.height, seg.width) != (flow.height, flow.width):
        raise DomainError("segmentation and flow dimensions differ")
    w = seg.width if next_width is None else int(next_width)
    h = seg.height if next_height is None else int(next_height)

    vs, us = np.nonzero(flow.valid)
    wx = us + flow.u[vs, us]
    wy = vs + flow.v[vs, us]
    tx = np.rint(wx).astype(np.int64)
    ty = np.rint(wy).astype(np.int64)
    inside = (tx >= 0) & (tx < w) & (ty >= 0) & (ty < h)
    if not inside.any():
        raise DomainError("no reference pixel lands inside the next-frame grid")

    tx, ty = tx[inside], ty[inside]
    dist = np.hypot(wx[inside] - tx, wy[inside] - ty)
    labels_src = seg.labels[vs[inside], us[inside]]
    tflat = ty * w + tx
    order = np.lexsort((labels_src, dist, tflat))
    tsorted = tflat[order]
    first = np.ones(len(tsorted), dtype=bool)
    first[1:] = tsorted[1:] != tsorted[:-1]

    labels = np.full((h, w), -1, dtype=np.int32)
    labels.ravel()[tsorted[first]] = labels_src[order[first]]

    unlabeled = int((labels < 0).sum())
    if unlabeled:
        _bfs_fill(labels)
    return labels, unlabeled


def _bfs_fill(labels: np.ndarray):
    """In-place 4-connected BFS fill of -1 cells from the labeled set."""
    h, w = labels.shape
    queue = deque()
    vs, us = np.nonzero(labels >= 0)
    for v, u in zip(vs.tolist(), us.tolist()):
        queue.append((v, u))
    while queue:
        v, u = queue.popleft()
        lab = labels[v, u]
        if v > 0 and labels[v - 1, u] < 0:
            labels[v - 1, u] = lab
            queue.append((v - 1, u))
        if v + 1 < h and labels[v + 1, u] < 0:
            labels[v + 1, u] = lab
            queue.append((v + 1, u))
        if u > 0 and labels[v, u - 1] < 0:
            labels[v, u - 1] = lab
            queue.append((v, u - 1))
        if u + 1 < w and labels[v, u + 1] < 0:
            labels[v, u + 1] = lab
            queue.append((v, u + 1))


def render_depth(planes: list, labels: np.ndarray,
                 intrinsics: CameraIntrinsics) -> DepthMap:
    """Per-pixel range by intersecting each pixel's ray with its label's plane.

    Grazing rays and intersections behind the camera are marked invalid
    rather than raising.
    """
    labels = np.asarray(labels)
    if labels.ndim != 2:
        raise DomainError("labels must be 2D")
    if labels.min() < 0 or labels.max() >= len(planes):
        raise DomainError("label out of range of the plane list")
    h, w = labels.shape
    normals = np.stack([p.normal for p in planes])
    depths = np.array([p.plane_depth for p in planes])
    rays = ray_grid(intrinsics, w, h)
    lam, ok = ray_plane_depth_many(normals[labels], depths[labels], rays)
    return DepthMap(np.where(ok, lam, 0.0), ok)


# ---------------------------------------------------------------------------
# Problem assembly
# ---------------------------------------------------------------------------

@dataclass
class PreparedStep:
    """Intermediate products of one propagation step, exposed for tests."""

    seg: segmentation.Segmentation
    triples: list
    graph: segmentation.RigidityGraph
    point_pixels: np.ndarray
    ref_depths: np.ndarray
    ref_rays: np.ndarray
    next_rays: np.ndarray
    warped_pixels: np.ndarray
    point_valid: np.ndarray
    problem: arap.ArapProblem
    merged_superpixels: int


def prepare_step(ref: SceneFrame, flow: FlowField, config: RunConfig,
                 next_width: int = None, next_height: int = None) -> PreparedStep:
    """Everything up to (and including) building the solver problem."""
    if ref.depth is None:
        raise UnusablePriorError("reference frame carries no depth prior")
    from .datatypes import require_same_shape
    require_same_shape("reference image", ref.image, "flow", flow)
    require_same_shape("reference image", ref.image, "depth prior", ref.depth)

    seg0 = segmentation.slic_segment(ref.image, config.superpixels,
                                     config.compactness)
    seg = segmentation.merge_degenerate_superpixels(seg0)
    merged = seg0.count - seg.count

    triples = []
    for lab in range(seg.count):
        try:
            triples.append(segmentation.select_anchor_triple(
                seg, lab, valid_mask=ref.depth.valid))
        except DegenerateSuperpixelError as exc:
            raise UnusablePriorError(
                f"prior cannot seed an anchor triple: {exc}",
                superpixel=lab) from exc

    pixels = np.concatenate([t.pixels() for t in triples])
    iu = pixels[:, 0].astype(np.intp)
    iv = pixels[:, 1].astype(np.intp)
    ref_depths = ref.depth.values[iv, iu]
    ref_rays = backproject_pixels(ref.intrinsics, pixels)

    graph = segmentation.build_knn_graph(
        triples, config.knn, config.knn_tau if config.knn_tau > 0 else None)
    ei, ej, ew = arap.expand_graph_to_points(graph)

    next_rays, warped_px, pvalid = arap.warp_to_next_rays(
        pixels, flow, ref.intrinsics, next_width, next_height)

    problem = arap.ArapProblem(ref_depths, ref_rays, next_rays, ei, ej, ew,
                               point_valid=pvalid,
                               smoothing_eps=config.smoothing_eps)
    return PreparedStep(seg, triples, graph, pixels, ref_depths, ref_rays,
                        next_rays, warped_px, pvalid, problem, merged)


def build_pair_contexts(boundary: segmentation.BoundarySet, flow: FlowField,
                        intrinsics: CameraIntrinsics, ref_planes: list,
                        next_width: int = None, next_height: int = None):
    """Per-adjacency-edge boundary data for the refinement MRF.

    Reference-side gaps come from the fitted reference planes; next-frame
    rays come from flow-warping the boundary pixels. Pairs whose reference
    intersection is degenerate or whose warp leaves the next grid are
    dropped. Returns (contexts dict keyed by (lo, hi), dropped_count).
    """
    m = len(boundary)
    if m == 0:
        return {}, 0
    li, lj = boundary.label_i, boundary.label_j
    lo = np.minimum(li, lj)
    hi = np.maximum(li, lj)
    swap = li != lo
    px_lo = np.where(swap[:, None], boundary.pixel_j, boundary.pixel_i)
    px_hi = np.where(swap[:, None], boundary.pixel_i, boundary.pixel_j)

    normals = np.stack([p.normal for p in ref_planes])
    pdepths = np.array([p.plane_depth for p in ref_planes])

    rays_lo_ref = backproject_pixels(intrinsics, px_lo)
    rays_hi_ref = backproject_pixels(intrinsics, px_hi)
    lam_lo, ok_lo = ray_plane_depth_many(normals[lo], pdepths[lo], rays_lo_ref)
    lam_hi, ok_hi = ray_plane_depth_many(normals[hi], pdepths[hi], rays_hi_ref)

    nrays_lo, _, wok_lo = arap.warp_to_next_rays(px_lo, flow, intrinsics,
                                                 next_width, next_height)
    nrays_hi, _, wok_hi = arap.warp_to_next_rays(px_hi, flow, intrinsics,
                                                 next_width, next_height)

    keep = ok_lo & ok_hi & wok_lo & wok_hi
    dropped = int(m - keep.sum())
    if not keep.any():
        return {}, dropped

    diff = (lam_lo[:, None] * rays_lo_ref - lam_hi[:, None] * rays_hi_ref)
    ref_gap2 = np.einsum("ij,ij->i", diff, diff)

    contexts = {}
    kidx = np.flatnonzero(keep)
    klo, khi = lo[kidx], hi[kidx]
    order = np.lexsort((khi, klo))
    kidx = kidx[order]
    klo, khi = klo[order], khi[order]
    change = np.flatnonzero((np.diff(klo) != 0) | (np.diff(khi) != 0)) + 1
    for chunk in np.split(kidx, change):
        key = (int(lo[chunk[0]]), int(hi[chunk[0]]))
        contexts[key] = refine.PairContext(
            rays_lo=nrays_lo[chunk],
            rays_hi=nrays_hi[chunk],
            ref_gap2=ref_gap2[chunk],
            w2=boundary.color_weights[chunk],
        )
    return contexts, dropped


# ---------------------------------------------------------------------------
# Single-step and multi-frame propagation
# ---------------------------------------------------------------------------

def propagate_depth(ref: SceneFrame, next_image: Image, flow: FlowField,
                    config: RunConfig) -> PipelineResult:
    """Propagate the reference depth prior to the next frame."""
    prep = prepare_step(ref, flow, config, next_image.width, next_image.height)
    solver_cfg = solver_config(config)
    report = arap.solve_arap(prep.problem, prep.ref_depths, solver_cfg)

    all_valid = np.ones(len(prep.ref_depths), dtype=bool)
    ref_planes, _ = refine.fit_planes(prep.ref_depths, prep.ref_rays, all_valid)
    next_planes, fit_diag = refine.fit_planes(
        report.final_depths, prep.next_rays, prep.point_valid,
        fallback_planes=ref_planes)

    labels_next, unlabeled = transfer_labels(
        prep.seg, flow, next_image.width, next_image.height)
    prerefine = render_depth(next_planes, labels_next, ref.intrinsics)

    boundary = segmentation.boundary_pairs(prep.seg, ref.image, config.beta)
    contexts, dropped_pairs = build_pair_contexts(
        boundary, flow, ref.intrinsics, ref_planes,
        next_image.width, next_image.height)

    anchor_rays = prep.next_rays[0::3]
    anchor_depths = report.final_depths[0::3]
    refined, trace = refine.trws_refine(next_planes, anchor_rays, anchor_depths,
                                        contexts, refine_config(config))
    next_depth = render_depth(refined, labels_next, ref.intrinsics)

    diag = Diagnostics(
        merged_superpixels=prep.merged_superpixels,
        invalid_warped_points=int((~prep.point_valid).sum()),
        dropped_edges=prep.problem.dropped_edges,
        plane_fallbacks=fit_diag,
        dropped_boundary_pairs=dropped_pairs,
        unlabeled_before_fill=unlabeled,
        render_invalid_pixels=int((~next_depth.valid).sum()),
    )
    logger.info(
        "propagate: %d superpixels, %d solver iterations (%s), "
        "%d invalid points, %d invalid rendered pixels",
        prep.seg.count, report.iterations_used, report.stop_reason,
        diag.invalid_warped_points, diag.render_invalid_pixels)
    return PipelineResult(next_depth, prerefine, refined, prep.seg,
                          prep.triples, labels_next, report, trace, diag)


def propagate_multiframe(frames: list, flows: list,
                         config: RunConfig) -> list:
    """Chain propagation across a frame sequence.

    ``frames[0]`` must carry the depth prior; later frames' ``depth`` (when
    present) is treated as ground truth: the step's MRE against it is logged
    and recorded in the diagnostics. Returns one PipelineResult per step.
    """
    if len(frames) < 2:
        raise DomainError("need at least 2 frames")
    if len(flows) != len(frames) - 1:
        raise DomainError(
            f"{len(frames)} frames need {len(frames) - 1} flows, got {len(flows)}")
    if frames[0].depth is None:
        raise UnusablePriorError("frames[0] carries no depth prior")

    from .evaluation import mre  # local import to avoid a cycle

    results = []
    prior = frames[0].depth
    for t in range(len(flows)):
        ref = SceneFrame(frames[t].image, frames[t].intrinsics, prior)
        result = propagate_depth(ref, frames[t + 1].image, flows[t], config)
        truth = frames[t + 1].depth
        if truth is not None:
            cap = config.eval_cap if config.eval_cap_enabled else None
            report = mre(result.next_depth, truth, cap=cap)
            result.diagnostics.mre_vs_ground_truth = report.mre
            logger.info("frame %d -> %d: MRE %.6f over %d pixels",
                        t, t + 1, report.mre, report.valid_pixels)
        results.append(result)
        prior = result.next_depth
    return results


def render_planar_reference(ref: SceneFrame, config: RunConfig) -> DepthMap:
    """Re-render the reference frame from its own fitted planes.

    Measures how much of the scene the piecewise-planar model can express
    (the planar-approximation error of a given segmentation granularity).
    """
    if ref.depth is None:
        raise UnusablePriorError("reference frame carries no depth prior")
    seg0 = segmentation.slic_segment(ref.image, config.superpixels,
                                     config.compactness)
    seg = segmentation.merge_degenerate_superpixels(seg0)
    triples = []
    for lab in range(seg.count):
        try:
            triples.append(segmentation.select_anchor_triple(
                seg, lab, valid_mask=ref.depth.valid))
        except DegenerateSuperpixelError as exc:
            raise UnusablePriorError(
                f"prior cannot seed an anchor triple: {exc}",
                superpixel=lab) from exc
    pixels = np.concatenate([t.pixels() for t in triples])
    iu = pixels[:, 0].astype(np.intp)
    iv = pixels[:, 1].astype(np.intp)
    depths = ref.depth.values[iv, iu]
    rays = backproject_pixels(ref.intrinsics, pixels)
    planes, _ = refine.fit_planes(depths, rays, np.ones(len(depths), dtype=bool))
    return render_depth(planes, seg.labels, ref.intrinsics)
