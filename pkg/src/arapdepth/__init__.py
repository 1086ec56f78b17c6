"""Flow-guided dense depth propagation with a piecewise-planar scene model.

Given one frame with dense depth, optical flow to the next frame, and camera
intrinsics, the package segments the reference frame into superpixels, moves
three anchor points per superpixel along the flow while keeping the sparse
point cloud as rigid as possible, fits a plane through each moved triple,
and smooths the resulting piecewise-planar depth map with a particle-based
discrete optimizer. Chaining the step propagates depth through a sequence.
"""

from .arap import (ArapProblem, SolveReport, arap_energy, arap_gradient,
                   expand_graph_to_points, finite_difference_gradient,
                   solve_arap, warp_to_next_rays)
from .config import RunConfig, SolverConfig, RefineConfig
from .datatypes import DepthMap, FlowField, Image
from .errors import (ArapDepthError, BehindCameraError, ConfigurationError,
                     DegenerateSuperpixelError, DegenerateTripleError,
                     DomainError, EmptyEvaluationError, GrazingRayError,
                     NumericalFailureError, ParseError, UnusablePriorError)
from .evaluation import (MetricReport, add_depth_noise, error_accumulation,
                         mre, run_sweep, sparse_prior_from_triples)
from .fileio import (read_config, read_csv, read_flo, read_image,
                     read_intrinsics, read_pfm, write_config, write_csv,
                     write_flo, write_image, write_intrinsics, write_pfm)
from .geometry import (CameraIntrinsics, PlaneParams, Point3, UnitRay,
                       backproject_pixels, backproject_ray, fit_plane,
                       plane_depth, plane_normal, point_from_depth,
                       project_point, project_points, range_to_zdepth,
                       ray_grid, ray_plane_depth, ray_plane_depth_many,
                       zdepth_to_range)
from .pipeline import (Diagnostics, PipelineResult, PreparedStep, SceneFrame,
                       build_pair_contexts, prepare_step, propagate_depth,
                       propagate_multiframe, render_depth,
                       render_planar_reference, transfer_labels)
from .refine import (PairContext, RefineTrace, TrwsResult, fit_planes,
                     generate_particles, refine_energy, trws_refine,
                     trws_solve)
from .segmentation import (AnchorTriple, BoundarySet, RigidityGraph,
                           Segmentation, boundary_pairs, build_knn_graph,
                           merge_degenerate_superpixels, select_all_triples,
                           select_anchor_triple, slic_segment)
from .synthetic import (SceneSpec, SyntheticScene, generate_scene,
                        scene_spec_from_file)

__version__ = "0.1.0"

__all__ = [
    "ArapDepthError", "ArapProblem", "AnchorTriple", "BehindCameraError",
    "BoundarySet", "CameraIntrinsics", "ConfigurationError",
    "DegenerateSuperpixelError", "DegenerateTripleError", "DepthMap",
    "Diagnostics", "DomainError", "EmptyEvaluationError", "FlowField",
    "GrazingRayError", "Image", "MetricReport", "NumericalFailureError",
    "PairContext", "ParseError", "PipelineResult", "PlaneParams", "Point3",
    "PreparedStep", "RefineConfig", "RefineTrace", "RigidityGraph",
    "RunConfig", "SceneFrame", "SceneSpec", "Segmentation", "SolveReport",
    "SolverConfig", "SyntheticScene", "TrwsResult", "UnitRay",
    "UnusablePriorError", "add_depth_noise", "arap_energy", "arap_gradient",
    "backproject_pixels", "backproject_ray", "boundary_pairs",
    "build_knn_graph", "build_pair_contexts", "error_accumulation",
    "expand_graph_to_points", "finite_difference_gradient", "fit_plane",
    "fit_planes", "generate_particles", "generate_scene",
    "merge_degenerate_superpixels", "mre", "plane_depth", "plane_normal",
    "point_from_depth", "prepare_step", "project_point", "project_points",
    "propagate_depth", "propagate_multiframe", "range_to_zdepth", "ray_grid",
    "ray_plane_depth", "ray_plane_depth_many", "read_config", "read_csv",
    "read_flo", "read_image", "read_intrinsics", "read_pfm", "refine_energy",
    "render_depth", "render_planar_reference", "run_sweep",
    "scene_spec_from_file", "select_all_triples", "select_anchor_triple",
    "slic_segment", "solve_arap", "sparse_prior_from_triples",
    "transfer_labels", "trws_refine", "trws_solve", "warp_to_next_rays",
    "write_config", "write_csv", "write_flo", "write_image",
    "write_intrinsics", "write_pfm", "zdepth_to_range",
]
