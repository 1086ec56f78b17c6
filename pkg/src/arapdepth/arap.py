"""As-rigid-as-possible depth transfer: energy, gradient and the solver.

The scene is represented by 3 tracked points per superpixel (anchor triples).
For an edge (i, j) of the point-level rigidity graph the energy penalizes the
change of the 3D distance between the two points from the reference frame to
the next frame:

    E(d~) = sum_e w_e * phi_eps( ||d_i e_i - d_j e_j|| - ||d~_i e~_i - d~_j e~_j|| )

where e / e~ are the unit viewing rays in the two frames, d are the known
reference depths and d~ the unknowns. phi_eps(x) = sqrt(x^2 + eps^2) - eps is
a smoothed absolute value, so the energy is differentiable everywhere.

The minimizer is projected gradient descent with Armijo backtracking
(halving); the trial step for each iteration is a safeguarded
Barzilai-Borwein secant length, which keeps the monotone-descent guarantee
while converging far faster than a fixed step.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass

import numpy as np

from .config import SolverConfig
from .datatypes import FlowField
from .errors import DomainError, NumericalFailureError
from .geometry import CameraIntrinsics, backproject_pixels
from .segmentation import RigidityGraph

logger = logging.getLogger(__name__)

DEPTH_FLOOR = 1e-4
RAY_NORM_TOL = 1e-9

_STEP_MIN = 1e-14
_STEP_MAX = 1e10

# Smoothing continuation: widen the absolute-value smoothing at the start
# and shrink it stage by stage once the reduced gradient is proportionally
# small. Shrinking the width never raises the energy at a fixed point.
_CONTINUATION_START = 1e-2
_CONTINUATION_DECAY = 10.0
_STAGE_TOL_FACTOR = 1e-2


def smoothed_abs(x, eps):
    """phi_eps(x) = sqrt(x^2 + eps^2) - eps; exact zero at x = 0."""
    x = np.asarray(x, dtype=np.float64)
    return np.sqrt(x * x + eps * eps) - eps


def smoothed_abs_prime(x, eps):
    """Derivative x / sqrt(x^2 + eps^2) of the smoothed absolute value."""
    x = np.asarray(x, dtype=np.float64)
    return x / np.sqrt(x * x + eps * eps)


# ---------------------------------------------------------------------------
# Point-level graph
# ---------------------------------------------------------------------------

def expand_graph_to_points(graph: RigidityGraph) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Expand a superpixel k-NN graph to tracked-point edges.

    Superpixel i owns points 3i, 3i+1, 3i+2 (anchor, p1, p2). Every directed
    superpixel edge (i -> j, weight w) becomes the 9 directed point edges
    between i's and j's points, all carrying w. Each superpixel additionally
    contributes its 3 internal point pairs with weight 1. Returns
    (edge_i, edge_j, weights).
    """
    n = len(graph.neighbors)
    ei, ej, ew = [], [], []
    offsets_i = np.repeat(np.arange(3), 3)  # 0 0 0 1 1 1 2 2 2
    offsets_j = np.tile(np.arange(3), 3)    # 0 1 2 0 1 2 0 1 2
    for i in range(n):
        nbrs = graph.neighbors[i]
        wts = graph.weights[i]
        if len(nbrs):
            base_i = 3 * i + offsets_i
            for j, w in zip(nbrs, wts):
                ei.append(base_i)
                ej.append(3 * int(j) + offsets_j)
                ew.append(np.full(9, float(w)))
        # intra-superpixel pairs (anchor,p1), (anchor,p2), (p1,p2)
        ei.append(np.array([3 * i, 3 * i, 3 * i + 1]))
        ej.append(np.array([3 * i + 1, 3 * i + 2, 3 * i + 2]))
        ew.append(np.ones(3))
    return (np.concatenate(ei).astype(np.intp),
            np.concatenate(ej).astype(np.intp),
            np.concatenate(ew))


def warp_to_next_rays(pixels: np.ndarray, flow: FlowField,
                      intrinsics: CameraIntrinsics,
                      next_width: int = None, next_height: int = None):
    """Flow-warp reference pixels and back-project the result.

    Returns (rays (M, 3), warped_pixels (M, 2), valid (M,)). A point is
    invalid when the flow sample is unusable or the warped position leaves
    [0, W-1] x [0, H-1] of the next-frame grid (defaults to the flow grid).
    Rays are still returned for invalid points so array shapes stay aligned.
    """
    px = np.atleast_2d(np.asarray(pixels, dtype=np.float64))
    w = flow.width if next_width is None else next_width
    h = flow.height if next_height is None else next_height
    vals, ok = flow.sample(px)
    warped = px + vals
    inside = ((warped[:, 0] >= 0) & (warped[:, 0] <= w - 1)
              & (warped[:, 1] >= 0) & (warped[:, 1] <= h - 1))
    valid = ok & inside
    safe = np.where(np.isfinite(warped), warped, 0.0)
    rays = backproject_pixels(intrinsics, safe)
    return rays, warped, valid


# ---------------------------------------------------------------------------
# Problem container
# ---------------------------------------------------------------------------

@dataclass
class ArapProblem:
    """Precomputed quantities for one energy minimization.

    Edges with an invalid endpoint are dropped at construction; their points
    remain as variables but receive zero gradient and keep their initial
    value.
    """

    ref_depths: np.ndarray
    ref_rays: np.ndarray
    next_rays: np.ndarray
    edge_i: np.ndarray
    edge_j: np.ndarray
    edge_w: np.ndarray
    point_valid: np.ndarray = None
    smoothing_eps: float = 1e-6

    def __post_init__(self):
        d = np.asarray(self.ref_depths, dtype=np.float64)
        if d.ndim != 1:
            raise DomainError("ref_depths must be a 1D array")
        m = len(d)
        if not np.all(np.isfinite(d)) or np.any(d <= 0):
            raise DomainError("reference depths must be finite and > 0")
        for name in ("ref_rays", "next_rays"):
            r = np.asarray(getattr(self, name), dtype=np.float64)
            if r.shape != (m, 3):
                raise DomainError(f"{name} must have shape ({m}, 3)")
            norms = np.linalg.norm(r, axis=1)
            if np.any(np.abs(norms - 1.0) > RAY_NORM_TOL):
                raise DomainError(f"{name} must be unit vectors")
            setattr(self, name, r)
        if self.point_valid is None:
            self.point_valid = np.ones(m, dtype=bool)
        else:
            self.point_valid = np.asarray(self.point_valid, dtype=bool)
            if self.point_valid.shape != (m,):
                raise DomainError("point_valid must have shape (M,)")
        if self.smoothing_eps <= 0:
            raise DomainError("smoothing_eps must be > 0")

        ei = np.asarray(self.edge_i, dtype=np.intp)
        ej = np.asarray(self.edge_j, dtype=np.intp)
        ew = np.asarray(self.edge_w, dtype=np.float64)
        if not (ei.shape == ej.shape == ew.shape) or ei.ndim != 1:
            raise DomainError("edge arrays must be 1D and aligned")
        if len(ei) and (ei.min() < 0 or ei.max() >= m or ej.min() < 0 or ej.max() >= m):
            raise DomainError("edge endpoint out of range")
        if np.any(ei == ej):
            raise DomainError("self-edges are not allowed")
        if np.any(ew <= 0) or np.any(ew > 1.0 + 1e-12):
            raise DomainError("edge weights must lie in (0, 1]")

        keep = self.point_valid[ei] & self.point_valid[ej]
        self.dropped_edges = int(len(ei) - keep.sum())
        self.ref_depths = d
        self.edge_i, self.edge_j, self.edge_w = ei[keep], ej[keep], ew[keep]

        # constants of the energy: reference edge lengths and next-frame
        # ray cosines
        di, dj = d[self.edge_i], d[self.edge_j]
        cos_ref = np.einsum("ij,ij->i", self.ref_rays[self.edge_i],
                            self.ref_rays[self.edge_j])
        self.ref_lengths = np.sqrt(
            np.maximum(di * di + dj * dj - 2.0 * di * dj * cos_ref, 0.0))
        self.next_cos = np.einsum("ij,ij->i", self.next_rays[self.edge_i],
                                  self.next_rays[self.edge_j])

    @property
    def num_points(self) -> int:
        return len(self.ref_depths)

    @property
    def num_edges(self) -> int:
        return len(self.edge_i)

    def next_lengths(self, depths: np.ndarray) -> np.ndarray:
        di = depths[self.edge_i]
        dj = depths[self.edge_j]
        return np.sqrt(np.maximum(
            di * di + dj * dj - 2.0 * di * dj * self.next_cos, 0.0))


def arap_energy(problem: ArapProblem, next_depths: np.ndarray,
                eps: float = None) -> float:
    """Total rigidity energy at the given next-frame depths.

    ``eps`` overrides the problem's smoothing width (used by the solver's
    continuation schedule); the default is the problem's own value.
    """
    d = np.asarray(next_depths, dtype=np.float64)
    if d.shape != (problem.num_points,):
        raise DomainError("next_depths has the wrong shape")
    if eps is None:
        eps = problem.smoothing_eps
    resid = problem.ref_lengths - problem.next_lengths(d)
    return float(np.sum(problem.edge_w * smoothed_abs(resid, eps)))


def arap_gradient(problem: ArapProblem, next_depths: np.ndarray,
                  eps: float = None) -> np.ndarray:
    """Analytic gradient of :func:`arap_energy` w.r.t. every depth.

    Uses dL~/dd~_i = (d~_i - d~_j * cos) / L~ with a zero subgradient at
    coincident points (L~ = 0).
    """
    d = np.asarray(next_depths, dtype=np.float64)
    if d.shape != (problem.num_points,):
        raise DomainError("next_depths has the wrong shape")
    if eps is None:
        eps = problem.smoothing_eps
    di = d[problem.edge_i]
    dj = d[problem.edge_j]
    lnext = problem.next_lengths(d)
    resid = problem.ref_lengths - lnext
    outer = problem.edge_w * smoothed_abs_prime(resid, eps)

    safe = np.where(lnext > 0, lnext, 1.0)
    dl_di = np.where(lnext > 0, (di - dj * problem.next_cos) / safe, 0.0)
    dl_dj = np.where(lnext > 0, (dj - di * problem.next_cos) / safe, 0.0)

    n = problem.num_points
    grad = np.bincount(problem.edge_i, weights=-outer * dl_di, minlength=n)
    grad += np.bincount(problem.edge_j, weights=-outer * dl_dj, minlength=n)
    return grad


def finite_difference_gradient(problem: ArapProblem, depths: np.ndarray,
                               h: float = 1e-6) -> np.ndarray:
    """Central-difference gradient, the reference for verification."""
    d = np.asarray(depths, dtype=np.float64)
    out = np.zeros_like(d)
    for i in range(len(d)):
        dp = d.copy(); dp[i] += h
        dm = d.copy(); dm[i] -= h
        out[i] = (arap_energy(problem, dp) - arap_energy(problem, dm)) / (2.0 * h)
    return out


# ---------------------------------------------------------------------------
# Solver
# ---------------------------------------------------------------------------

@dataclass
class SolveReport:
    """Outcome of one projected-gradient minimization.

    energy_trace[k] is the energy after k accepted steps; step_sizes and
    pg_norms are aligned with the trace (step_sizes[0] is NaN).
    """

    final_depths: np.ndarray
    energy_trace: np.ndarray
    step_sizes: np.ndarray
    pg_norms: np.ndarray
    iterations_used: int
    converged: bool
    stop_reason: str
    wall_time: float
    presolve_iterations: int = 0


def _reduced_gradient(x, g, lo, hi):
    pg = g.copy()
    pg[(x <= lo) & (g > 0)] = 0.0
    pg[(x >= hi) & (g < 0)] = 0.0
    return pg


def _descend(problem, x, eps, lo, hi, config, budget, tolerance, record):
    """Projected-gradient descent with Armijo halving at one smoothing width.

    Mutates nothing; returns (x, iterations, stop_reason, trace, steps, pgns)
    where the histories are populated only when ``record`` is set. Trial
    steps come from the Barzilai-Borwein pair when curvature is available.
    """
    energy = arap_energy(problem, x, eps)
    if not np.isfinite(energy):
        raise NumericalFailureError("non-finite energy at the initial point",
                                    iteration=0)
    grad = arap_gradient(problem, x, eps)
    if not np.all(np.isfinite(grad)):
        raise NumericalFailureError("non-finite gradient at the initial point",
                                    iteration=0)

    trace = [energy]
    steps = [np.nan]
    pgns = [float(np.linalg.norm(_reduced_gradient(x, grad, lo, hi)))]

    stop_reason = "max_iterations"
    prev_x = None
    prev_g = None
    step = config.initial_step
    iterations = 0

    for it in range(1, budget + 1):
        pg_norm = float(np.linalg.norm(_reduced_gradient(x, grad, lo, hi)))
        if pg_norm < tolerance:
            stop_reason = "gradient_tolerance"
            break

        # Barzilai-Borwein trial step from the previous accepted pair
        if prev_x is not None:
            s = x - prev_x
            y = grad - prev_g
            sy = float(np.dot(s, y))
            if sy > 0:
                step = float(np.dot(s, s)) / sy
            else:
                step = step * 2.0
        step = float(np.clip(step, _STEP_MIN, _STEP_MAX))

        accepted = False
        t = step
        for _ in range(config.max_backtracks):
            x_new = np.clip(x - t * grad, lo, hi)
            moved = x - x_new
            decrease = float(np.dot(grad, moved))
            if decrease <= 0.0:
                t *= 0.5
                continue
            e_new = arap_energy(problem, x_new, eps)
            if not np.isfinite(e_new):
                raise NumericalFailureError("non-finite energy in line search",
                                            iteration=it)
            if e_new <= energy - config.armijo_c * decrease:
                accepted = True
                break
            t *= 0.5
        if not accepted:
            stop_reason = "line_search_stall"
            break

        prev_x, prev_g = x, grad
        x, energy = x_new, e_new
        grad = arap_gradient(problem, x, eps)
        if not np.all(np.isfinite(grad)):
            raise NumericalFailureError("non-finite gradient", iteration=it)
        iterations = it
        if record:
            trace.append(energy)
            steps.append(t)
            pgns.append(float(np.linalg.norm(
                _reduced_gradient(x, grad, lo, hi))))

    return x, iterations, stop_reason, trace, steps, pgns


def solve_arap(problem: ArapProblem, init: np.ndarray,
               config: SolverConfig) -> SolveReport:
    """Minimize the rigidity energy over next-frame depths.

    The iterate stays inside [max(depth_floor, d - d_sigma), d + d_sigma]
    when the isometry box is enabled, else in [depth_floor, inf). NaN/Inf
    anywhere raises NumericalFailureError with the iteration index.

    The smoothed absolute value approaches the exact one from below as its
    width shrinks, and close to the kinks plain gradient descent zigzags
    with steps proportional to the width. The solver therefore warms up
    with a presolve at widened smoothing (stages shrinking from 1e-2 down
    to the configured width, at most half the iteration budget in total)
    and then descends the configured objective from the presolved point.
    The reported trace covers only that final descent, so it is
    non-increasing by Armijo construction; presolve work is reported
    separately in presolve_iterations.
    """
    t0 = time.perf_counter()
    d0 = problem.ref_depths
    floor = config.depth_floor
    if floor <= 0:
        raise DomainError("depth_floor must be > 0")
    if config.use_isometry_box:
        if config.d_sigma <= 0:
            raise DomainError("d_sigma must be > 0 when the isometry box is enabled")
        lo = np.maximum(floor, d0 - config.d_sigma)
        hi = d0 + config.d_sigma
    else:
        lo = np.full_like(d0, floor)
        hi = np.full_like(d0, np.inf)

    init = np.asarray(init, dtype=np.float64)
    if init.shape != d0.shape:
        raise DomainError("init has the wrong shape")
    x = np.clip(init, lo, hi)

    eps_final = problem.smoothing_eps
    presolve_used = 0
    presolve_budget = config.max_iterations // 2
    stages = []
    eps = _CONTINUATION_START
    while eps > eps_final:
        stages.append(eps)
        eps /= _CONTINUATION_DECAY
    for k, eps in enumerate(stages):
        remaining = presolve_budget - presolve_used
        if remaining <= 0:
            break
        stage_budget = max(1, remaining // (len(stages) - k))
        stage_tol = max(config.gradient_tolerance, _STAGE_TOL_FACTOR * eps)
        x, used, _, _, _, _ = _descend(
            problem, x, eps, lo, hi, config, budget=stage_budget,
            tolerance=stage_tol, record=False)
        presolve_used += used

    budget = config.max_iterations - presolve_used
    x, iterations, stop_reason, trace, steps, pgns = _descend(
        problem, x, eps_final, lo, hi, config, budget=budget,
        tolerance=config.gradient_tolerance, record=True)

    wall = time.perf_counter() - t0
    logger.debug("solve_arap: %d+%d iterations, energy %.6e -> %.6e (%s, %.3fs)",
                 presolve_used, iterations, trace[0], trace[-1], stop_reason,
                 wall)
    return SolveReport(
        final_depths=x,
        energy_trace=np.asarray(trace),
        step_sizes=np.asarray(steps),
        pg_norms=np.asarray(pgns),
        iterations_used=iterations,
        converged=stop_reason == "gradient_tolerance",
        stop_reason=stop_reason,
        wall_time=wall,
        presolve_iterations=presolve_used,
    )


# ---------------------------------------------------------------------------
# Random instances (used by the gradient-check command and tests)
# ---------------------------------------------------------------------------

def random_problem(seed: int, n_points: int = 24,
                   edges_per_point: int = 4) -> tuple[ArapProblem, np.ndarray]:
    """A seeded random instance plus a strictly feasible evaluation point.

    Rays come from random pixels of a virtual camera (so z > 0 holds), depths
    are uniform in [1, 4], and the evaluation depths are log-normal
    perturbations of the reference depths. Returns (problem, depths).
    """
    if n_points < 2:
        raise DomainError("need at least 2 points")
    rng = np.random.default_rng(seed)
    cam = CameraIntrinsics(fx=100.0, fy=100.0, cx=64.0, cy=48.0)
    ref_px = rng.uniform([0, 0], [127, 95], size=(n_points, 2))
    next_px = ref_px + rng.normal(0.0, 4.0, size=(n_points, 2))
    ref_rays = backproject_pixels(cam, ref_px)
    next_rays = backproject_pixels(cam, next_px)
    depths = rng.uniform(1.0, 4.0, size=n_points)

    ei, ej = [], []
    for i in range(n_points):
        others = np.delete(np.arange(n_points), i)
        nbrs = rng.choice(others, size=min(edges_per_point, n_points - 1),
                          replace=False)
        for j in nbrs:
            ei.append(i)
            ej.append(int(j))
    ew = rng.uniform(0.2, 1.0, size=len(ei))
    problem = ArapProblem(depths, ref_rays, next_rays,
                          np.array(ei), np.array(ej), ew)
    eval_depths = depths * np.exp(rng.normal(0.0, 0.2, size=n_points))
    return problem, eval_depths
