"""Piecewise-planar refinement of the solved depths.

After the rigidity solve, every superpixel gets a 3D plane through its three
tracked points. This module smooths those planes with a pairwise MRF over the
superpixel adjacency graph:

* orientation term: lambda1 * min(1 - |n_i . n_j|, sigma1)
* shape term: per boundary pixel pair, exp(-beta ||I_i - I_j||) *
  min(ref_gap^2 + next_gap^2, sigma2), where the gaps are squared 3D
  distances between the two sides' plane predictions in the reference and
  next frame
* unary term: unary_weight * (anchor depth predicted by the candidate plane
  minus the solved anchor depth)^2, anchoring the labeling to the solve.

Inference is particle-based: each move proposes a few perturbed planes per
superpixel (the incumbent always included) and runs sequential
tree-reweighted message passing (TRW-S) over the candidate labels. The
incumbent labeling is kept whenever it beats the TRW-S labeling, so a move
never increases the combined energy.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .config import RefineConfig
from .errors import DomainError, NumericalFailureError
from .geometry import PlaneParams, ray_plane_depth_many

logger = logging.getLogger(__name__)

# Finite stand-in cost for candidates whose plane cannot explain the anchor
# pixel at all (grazing or behind the camera). Large enough to never win,
# finite so cost tables stay well-defined.
INVALID_CANDIDATE_PENALTY = 1e9


# ---------------------------------------------------------------------------
# Plane fitting
# ---------------------------------------------------------------------------

def fit_planes(depths: np.ndarray, rays: np.ndarray, valid: np.ndarray,
               fallback_planes: list = None):
    """Fit one plane per superpixel through its three tracked points.

    ``depths``/``rays``/``valid`` are point-level arrays of length 3N laid
    out as (anchor, p1, p2) per superpixel. Superpixels whose triple is
    incomplete (an invalid point) or collinear in 3D fall back to the
    matching entry of ``fallback_planes`` re-anchored at the warped anchor
    point, or to a fronto-parallel plane when no fallbacks are given.

    Returns (planes, diagnostics) where diagnostics is a list of
    (superpixel, reason) tuples for every fallback taken.
    """
    depths = np.asarray(depths, dtype=np.float64)
    rays = np.asarray(rays, dtype=np.float64)
    valid = np.asarray(valid, dtype=bool)
    if len(depths) % 3 != 0:
        raise DomainError("point arrays must have length 3N")
    n = len(depths) // 3
    if fallback_planes is not None and len(fallback_planes) != n:
        raise DomainError("fallback_planes must have one entry per superpixel")

    planes = []
    diagnostics = []
    for i in range(n):
        sl = slice(3 * i, 3 * i + 3)
        ok = bool(valid[sl].all()) and bool(np.all(depths[sl] > 0))
        plane = None
        reason = None
        if ok:
            pts = depths[sl, None] * rays[sl]
            ea = pts[0] - pts[1]
            eb = pts[0] - pts[2]
            cross = np.cross(ea, eb)
            cnorm = float(np.linalg.norm(cross))
            scale = float(np.linalg.norm(ea) * np.linalg.norm(eb))
            if cnorm > 1e-8 * scale and cnorm > 0:
                normal = cross / cnorm
                if float(np.dot(normal, pts[0])) < 0:
                    normal = -normal
                d = float(np.dot(normal, pts[0]))
                if d > 0:
                    plane = PlaneParams(normal, d)
            if plane is None:
                reason = "collinear triple"
        else:
            reason = "invalid point in triple"

        if plane is None:
            plane = _fallback_plane(i, depths, rays, valid,
                                    fallback_planes)
            diagnostics.append((i, reason))
        planes.append(plane)
    return planes, diagnostics


def _fallback_plane(i, depths, rays, valid, fallback_planes):
    anchor = 3 * i
    if fallback_planes is not None:
        base = fallback_planes[i]
        if valid[anchor] and depths[anchor] > 0:
            x_a = depths[anchor] * rays[anchor]
            d = float(np.dot(base.normal, x_a))
            if d > 1e-12:
                return PlaneParams(base.normal, d)
        return base
    # no fallback supplied: fronto-parallel plane through the anchor point
    if valid[anchor] and depths[anchor] > 0:
        z = float(depths[anchor] * rays[anchor][2])
    else:
        z = 1.0
    return PlaneParams(np.array([0.0, 0.0, 1.0]), z)


# ---------------------------------------------------------------------------
# Pairwise context and costs
# ---------------------------------------------------------------------------

@dataclass
class PairContext:
    """Boundary data shared by all candidate pairs of one adjacency edge.

    ``rays_lo``/``rays_hi`` are the warped next-frame rays of the boundary
    pixels on the lower/higher label's side; ``ref_gap2`` the squared 3D
    distance between the two sides' reference-plane points; ``w2`` the color
    weights.
    """

    rays_lo: np.ndarray
    rays_hi: np.ndarray
    ref_gap2: np.ndarray
    w2: np.ndarray

    def __len__(self):
        return len(self.w2)


def orientation_cost(normal_i: np.ndarray, normal_j: np.ndarray,
                     lambda1: float, sigma1: float) -> float:
    """Truncated angular disagreement lambda1 * min(1 - |n_i . n_j|, sigma1)."""
    ni = np.asarray(normal_i, dtype=np.float64)
    nj = np.asarray(normal_j, dtype=np.float64)
    dot = abs(float(np.dot(ni, nj))) / (float(np.linalg.norm(ni))
                                        * float(np.linalg.norm(nj)))
    return lambda1 * min(1.0 - min(dot, 1.0), sigma1)


def orientation_cost_table(normals_lo: np.ndarray, normals_hi: np.ndarray,
                           lambda1: float, sigma1: float) -> np.ndarray:
    """(P, Q) orientation costs between two candidate sets of unit normals."""
    dots = np.abs(normals_lo @ normals_hi.T)
    return lambda1 * np.minimum(1.0 - np.minimum(dots, 1.0), sigma1)


def shape_cost_table(normals_lo, depths_lo, normals_hi, depths_hi,
                     ctx: PairContext, sigma2: float) -> np.ndarray:
    """(P, Q) boundary shape costs between two candidate plane sets.

    Per boundary pixel pair the contribution is w2 * min(ref_gap^2 +
    next_gap^2, sigma2); candidates that graze a boundary ray (or put it
    behind the camera) contribute the truncation value sigma2 there.
    """
    normals_lo = np.atleast_2d(normals_lo)
    normals_hi = np.atleast_2d(normals_hi)
    depths_lo = np.atleast_1d(depths_lo)
    depths_hi = np.atleast_1d(depths_hi)
    m = len(ctx)
    if m == 0:
        return np.zeros((len(depths_lo), len(depths_hi)))

    lam_lo, ok_lo = ray_plane_depth_many(
        normals_lo[:, None, :], depths_lo[:, None], ctx.rays_lo[None, :, :])
    lam_hi, ok_hi = ray_plane_depth_many(
        normals_hi[:, None, :], depths_hi[:, None], ctx.rays_hi[None, :, :])
    pts_lo = np.where(ok_lo[..., None], lam_lo[..., None] * ctx.rays_lo[None], 0.0)
    pts_hi = np.where(ok_hi[..., None], lam_hi[..., None] * ctx.rays_hi[None], 0.0)

    diff = pts_lo[:, None, :, :] - pts_hi[None, :, :, :]
    gap2 = np.einsum("pqmk,pqmk->pqm", diff, diff)
    inner = np.minimum(ctx.ref_gap2[None, None, :] + gap2, sigma2)
    usable = ok_lo[:, None, :] & ok_hi[None, :, :]
    contrib = np.where(usable, inner, sigma2)
    return contrib @ ctx.w2


def shape_cost(plane_i: PlaneParams, plane_j: PlaneParams,
               ctx: PairContext, sigma2: float) -> float:
    """Scalar shape cost between two concrete planes."""
    table = shape_cost_table(plane_i.normal[None], np.array([plane_i.plane_depth]),
                             plane_j.normal[None], np.array([plane_j.plane_depth]),
                             ctx, sigma2)
    return float(table[0, 0])


def unary_cost_table(normals, depths, anchor_rays, anchor_depths,
                     unary_weight: float) -> np.ndarray:
    """(N, P) anchoring costs of candidate planes to the solved anchor depths."""
    normals = np.asarray(normals, dtype=np.float64)
    depths = np.asarray(depths, dtype=np.float64)
    lam, ok = ray_plane_depth_many(normals, depths,
                                   np.asarray(anchor_rays)[:, None, :])
    dev = lam - np.asarray(anchor_depths, dtype=np.float64)[:, None]
    cost = unary_weight * dev * dev
    return np.where(ok, cost, INVALID_CANDIDATE_PENALTY)


# ---------------------------------------------------------------------------
# Particles
# ---------------------------------------------------------------------------

def generate_particles(plane: PlaneParams, count: int, sigma_normal: float,
                       sigma_depth: float, rng: np.random.Generator):
    """``count`` candidate planes; index 0 is the unmodified incumbent.

    Normals are rotated about a random axis by an angle ~ N(0, sigma_normal)
    (radians); plane depths are multiplied by exp(N(0, sigma_depth)), so they
    stay positive by construction.
    """
    if count < 1:
        raise DomainError("count must be >= 1")
    normals = np.empty((count, 3))
    depths = np.empty(count)
    normals[0] = plane.normal
    depths[0] = plane.plane_depth
    for p in range(1, count):
        axis = rng.normal(size=3)
        norm = np.linalg.norm(axis)
        axis = axis / norm if norm > 0 else np.array([1.0, 0.0, 0.0])
        angle = rng.normal(0.0, sigma_normal) if sigma_normal > 0 else 0.0
        if angle == 0.0:
            normals[p] = plane.normal
        else:
            n = _rotate(plane.normal, axis, angle)
            normals[p] = n / np.linalg.norm(n)
        scale = np.exp(rng.normal(0.0, sigma_depth)) if sigma_depth > 0 else 1.0
        depths[p] = plane.plane_depth * scale
    return normals, depths


def _rotate(vec, axis, angle):
    c, s = np.cos(angle), np.sin(angle)
    return (vec * c + np.cross(axis, vec) * s
            + axis * np.dot(axis, vec) * (1.0 - c))


@dataclass
class PlaneLabelSet:
    """Candidate planes per superpixel plus the currently selected index."""

    normals: np.ndarray   # (N, P, 3)
    depths: np.ndarray    # (N, P)
    current: np.ndarray   # (N,)

    def __post_init__(self):
        if np.any(self.depths <= 0) or not np.all(np.isfinite(self.depths)):
            raise DomainError("candidate plane depths must be finite and > 0")
        norms = np.linalg.norm(self.normals, axis=2)
        if np.any(np.abs(norms - 1.0) > 1e-9):
            raise DomainError("candidate normals must be unit vectors")
        if np.any(self.current < 0) or np.any(self.current >= self.depths.shape[1]):
            raise DomainError("current index out of range")


# ---------------------------------------------------------------------------
# Sequential tree-reweighted message passing
# ---------------------------------------------------------------------------

@dataclass
class TrwsResult:
    labels: np.ndarray
    lower_bounds: list
    energy: float
    passes: int


def _labeling_energy(unary, edges, labels):
    e = sum(float(unary[i][labels[i]]) for i in range(len(unary)))
    e += sum(float(c[labels[i], labels[j]]) for i, j, c in edges)
    return e


def _build_chains(n, edges):
    """Monotonic chain decomposition: every edge in exactly one chain.

    At each node the incoming (lower) and outgoing (higher) edges are paired
    off in sorted order; unpaired outgoing edges start chains. Returns
    (chains, kappa) where each chain is a list of (node, edge_index) steps
    ending with (node, None), and kappa[i] counts the chains through node i.
    """
    incoming = [[] for _ in range(n)]
    outgoing = [[] for _ in range(n)]
    for idx, (i, j, _c) in enumerate(edges):
        outgoing[i].append((j, idx))
        incoming[j].append((i, idx))
    for lst in incoming:
        lst.sort()
    for lst in outgoing:
        lst.sort()

    # continuation[edge] = next edge when the chain passes through, else None
    continuation = {}
    starts = []
    for v in range(n):
        nin, nout = len(incoming[v]), len(outgoing[v])
        for t in range(max(nin, nout)):
            ein = incoming[v][t][1] if t < nin else None
            eout = outgoing[v][t][1] if t < nout else None
            if ein is not None:
                continuation[ein] = eout
            elif eout is not None:
                starts.append(eout)

    chains = []
    kappa = np.zeros(n, dtype=np.intp)
    for e0 in starts:
        chain = []
        e = e0
        node = edges[e][0]
        while e is not None:
            chain.append((node, e))
            node = edges[e][1]
            e = continuation[e]
        chain.append((node, None))
        chains.append(chain)
    for v in range(n):
        deg = max(len(incoming[v]), len(outgoing[v]))
        kappa[v] = deg if deg > 0 else 1
    for v in range(n):
        if not incoming[v] and not outgoing[v]:
            chains.append([(v, None)])
    return chains, kappa


def trws_solve(unary: list, edges: list, max_passes: int = 50,
               tolerance: float = 1e-6) -> TrwsResult:
    """Sequential TRW-S over a pairwise MRF with per-node label sets.

    ``unary[i]`` is the (P_i,) cost vector of node i; ``edges`` holds
    (i, j, cost) with i < j and cost of shape (P_i, P_j). Nodes are processed
    in index order (forward) and reverse (backward). After every full pass
    the lower bound of the monotonic-chain decomposition is evaluated by
    exact DP on each chain and a labeling is extracted greedily; the best
    primal labeling seen is returned. Iteration stops when the bound improves
    by less than ``tolerance`` or after ``max_passes``.
    """
    n = len(unary)
    unary = [np.asarray(u, dtype=np.float64) for u in unary]
    for i, j, c in edges:
        if not (0 <= i < j < n):
            raise DomainError("edges must satisfy 0 <= i < j < n")
        if c.shape != (len(unary[i]), len(unary[j])):
            raise DomainError("cost table shape mismatch")
    if any(not np.all(np.isfinite(u)) for u in unary) or \
       any(not np.all(np.isfinite(c)) for _, _, c in edges):
        raise NumericalFailureError("non-finite cost in MRF tables")

    fwd = [[] for _ in range(n)]   # (j, edge_idx) with j > i
    bwd = [[] for _ in range(n)]   # (j, edge_idx) with j < i
    for idx, (i, j, _c) in enumerate(edges):
        fwd[i].append((j, idx))
        bwd[j].append((i, idx))
    gamma = np.ones(n)
    for i in range(n):
        deg = max(len(fwd[i]), len(bwd[i]))
        gamma[i] = 1.0 / deg if deg > 0 else 1.0

    # messages per edge: [low -> high, high -> low]
    msg_lo = [np.zeros(len(unary[j])) for _, j, _c in edges]
    msg_hi = [np.zeros(len(unary[i])) for i, _j, _c in edges]

    def theta_hat(i):
        th = unary[i].copy()
        for j, e in fwd[i]:
            th += msg_hi[e]
        for j, e in bwd[i]:
            th += msg_lo[e]
        return th

    chains, kappa = _build_chains(n, edges)

    def lower_bound():
        hats = [theta_hat(i) for i in range(n)]
        total = 0.0
        for chain in chains:
            node0, e0 = chain[0]
            acc = hats[node0] / kappa[node0]
            for (u, e), (v, _e2) in zip(chain[:-1], chain[1:]):
                i, j, c = edges[e]
                rep = c - msg_lo[e][None, :] - msg_hi[e][:, None]
                acc = np.min(acc[:, None] + rep, axis=0) + hats[v] / kappa[v]
            total += float(np.min(acc))
        return total

    def extract():
        labels = np.zeros(n, dtype=np.intp)
        for i in range(n):
            score = unary[i].copy()
            for j, e in bwd[i]:
                score += edges[e][2][labels[j], :]
            for j, e in fwd[i]:
                score += msg_hi[e]
            labels[i] = int(np.argmin(score))
        return labels

    bounds = []
    best_labels = extract()
    best_energy = _labeling_energy(unary, edges, best_labels)
    passes = 0

    for sweep in range(max_passes):
        # forward pass
        for i in range(n):
            if not fwd[i]:
                continue
            th = theta_hat(i)
            for j, e in fwd[i]:
                base = gamma[i] * th - msg_hi[e]
                msg_lo[e] = np.min(base[:, None] + edges[e][2], axis=0)
        # backward pass
        for i in range(n - 1, -1, -1):
            if not bwd[i]:
                continue
            th = theta_hat(i)
            for j, e in bwd[i]:
                base = gamma[i] * th - msg_lo[e]
                msg_hi[e] = np.min(base[None, :] + edges[e][2], axis=1)

        passes = sweep + 1
        bounds.append(lower_bound())
        labels = extract()
        energy = _labeling_energy(unary, edges, labels)
        if energy < best_energy:
            best_energy = energy
            best_labels = labels
        if len(bounds) >= 2 and abs(bounds[-1] - bounds[-2]) < tolerance:
            break

    return TrwsResult(best_labels, bounds, best_energy, passes)


# ---------------------------------------------------------------------------
# Refinement driver
# ---------------------------------------------------------------------------

@dataclass
class MoveTrace:
    move: int
    energy_before: float
    energy_after: float
    lower_bounds: list
    passes: int
    source: str  # "trws" or "incumbent"


@dataclass
class RefineTrace:
    moves: list = field(default_factory=list)

    @property
    def energy_path(self):
        if not self.moves:
            return []
        return [self.moves[0].energy_before] + [m.energy_after for m in self.moves]


def _edge_tables(contexts, normals, depths, cfg):
    tables = []
    for (lo, hi), ctx in contexts.items():
        c = orientation_cost_table(normals[lo], normals[hi], cfg.lambda1, cfg.sigma1)
        c = c + shape_cost_table(normals[lo], depths[lo], normals[hi], depths[hi],
                                 ctx, cfg.sigma2)
        tables.append((lo, hi, c))
    return tables


def refine_energy(planes: list, anchor_rays, anchor_depths, contexts,
                  cfg: RefineConfig) -> float:
    """Combined unary + pairwise energy of one concrete plane assignment."""
    normals = np.stack([p.normal for p in planes])[:, None, :]
    depths = np.array([p.plane_depth for p in planes])[:, None]
    unary = unary_cost_table(normals, depths, anchor_rays, anchor_depths,
                             cfg.unary_weight)
    total = float(unary.sum())
    for (lo, hi), ctx in contexts.items():
        total += orientation_cost(planes[lo].normal, planes[hi].normal,
                                  cfg.lambda1, cfg.sigma1)
        total += shape_cost(planes[lo], planes[hi], ctx, cfg.sigma2)
    return total


def trws_refine(planes: list, anchor_rays: np.ndarray, anchor_depths: np.ndarray,
                contexts: dict, cfg: RefineConfig):
    """Particle-based refinement of per-superpixel planes.

    Runs ``cfg.moves`` rounds: propose ``cfg.particles_per_move`` candidate
    planes per superpixel (incumbent first), run TRW-S over the candidate
    labels, and keep the better of the TRW-S labeling and the incumbent.
    Returns (refined_planes, RefineTrace).
    """
    n = len(planes)
    anchor_rays = np.asarray(anchor_rays, dtype=np.float64)
    anchor_depths = np.asarray(anchor_depths, dtype=np.float64)
    if anchor_rays.shape != (n, 3) or anchor_depths.shape != (n,):
        raise DomainError("anchor arrays must be (N, 3) and (N,)")
    rng = np.random.default_rng(cfg.random_seed)
    current = list(planes)
    trace = RefineTrace()

    for move in range(cfg.moves):
        normals = np.empty((n, cfg.particles_per_move, 3))
        depths = np.empty((n, cfg.particles_per_move))
        for i in range(n):
            normals[i], depths[i] = generate_particles(
                current[i], cfg.particles_per_move,
                cfg.perturb_sigma_normal, cfg.perturb_sigma_depth, rng)

        unary = unary_cost_table(normals, depths, anchor_rays, anchor_depths,
                                 cfg.unary_weight)
        tables = _edge_tables(contexts, normals, depths, cfg)
        unary_list = [unary[i] for i in range(n)]

        incumbent = np.zeros(n, dtype=np.intp)
        energy_before = _labeling_energy(unary_list, tables, incumbent)

        result = trws_solve(unary_list, tables, cfg.trws_max_passes,
                            cfg.trws_tolerance)
        if result.energy <= energy_before:
            labels, energy_after, source = result.labels, result.energy, "trws"
        else:
            labels, energy_after, source = incumbent, energy_before, "incumbent"

        current = [PlaneParams(normals[i, labels[i]].copy(),
                               float(depths[i, labels[i]]))
                   for i in range(n)]
        trace.moves.append(MoveTrace(move, energy_before, energy_after,
                                     result.lower_bounds, result.passes, source))
        logger.debug("refine move %d: %.6e -> %.6e (%s, %d passes)",
                     move, energy_before, energy_after, source, result.passes)

    return current, trace
