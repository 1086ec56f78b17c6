"""Run configuration: one flat key=value namespace shared by library and CLI.

RunConfig is the single source of truth for every tunable. The CLI exposes
each field as a flag of the same name, and the file format parsed by
``fileio.read_config`` uses the same keys.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

from .errors import ConfigurationError

DEG5 = math.radians(5.0)


@dataclass
class RunConfig:
    # segmentation
    superpixels: int = 1100
    compactness: float = 10.0
    knn: int = 20
    knn_tau: float = 0.0          # 0 -> mean k-NN anchor distance
    beta: float = 10.0            # color weight exponent for boundary pairs

    # solver
    smoothing_eps: float = 1e-6
    max_iterations: int = 500
    gradient_tolerance: float = 1e-8
    use_isometry_box: bool = True
    d_sigma: float = 1.0
    depth_floor: float = 1e-4
    initial_step: float = 1.0
    armijo_c: float = 1e-4
    max_backtracks: int = 60

    # refinement
    lambda1: float = 0.1
    sigma1: float = 0.5
    sigma2: float = 0.5
    particles_per_move: int = 10
    moves: int = 5
    perturb_sigma_normal: float = DEG5   # radians
    perturb_sigma_depth: float = 0.05    # log-space sigma
    unary_weight: float = 1.0
    trws_max_passes: int = 50
    trws_tolerance: float = 1e-6

    # I/O and evaluation
    depth_convention: str = "range"      # "range" | "z"
    eval_cap: float = 50.0               # scene units
    eval_cap_enabled: bool = False       # KITTI-like datasets only

    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.superpixels < 2:
            raise ConfigurationError("superpixels must be >= 2")
        if self.compactness <= 0:
            raise ConfigurationError("compactness must be > 0")
        if self.knn < 1:
            raise ConfigurationError("knn must be >= 1")
        if self.knn_tau < 0:
            raise ConfigurationError("knn_tau must be >= 0 (0 means automatic)")
        if self.beta < 0:
            raise ConfigurationError("beta must be >= 0")
        if self.smoothing_eps <= 0:
            raise ConfigurationError("smoothing_eps must be > 0")
        if self.max_iterations < 0:
            raise ConfigurationError("max_iterations must be >= 0")
        if self.gradient_tolerance < 0:
            raise ConfigurationError("gradient_tolerance must be >= 0")
        if self.depth_floor <= 0:
            raise ConfigurationError("depth_floor must be > 0")
        if self.use_isometry_box and self.d_sigma <= 0:
            raise ConfigurationError("d_sigma must be > 0 when the box is enabled")
        if self.initial_step <= 0:
            raise ConfigurationError("initial_step must be > 0")
        if not (0 < self.armijo_c < 1):
            raise ConfigurationError("armijo_c must lie in (0, 1)")
        if self.max_backtracks < 1:
            raise ConfigurationError("max_backtracks must be >= 1")
        if self.lambda1 < 0 or self.sigma1 < 0 or self.sigma2 < 0:
            raise ConfigurationError("lambda1/sigma1/sigma2 must be >= 0")
        if self.particles_per_move < 2:
            raise ConfigurationError("particles_per_move must be >= 2")
        if self.moves < 0:
            raise ConfigurationError("moves must be >= 0")
        if self.perturb_sigma_normal < 0 or self.perturb_sigma_depth < 0:
            raise ConfigurationError("perturbation sigmas must be >= 0")
        if self.unary_weight < 0:
            raise ConfigurationError("unary_weight must be >= 0")
        if self.trws_max_passes < 1:
            raise ConfigurationError("trws_max_passes must be >= 1")
        if self.trws_tolerance < 0:
            raise ConfigurationError("trws_tolerance must be >= 0")
        if self.depth_convention not in ("range", "z"):
            raise ConfigurationError(
                f"depth_convention must be 'range' or 'z', got {self.depth_convention!r}"
            )
        if self.eval_cap <= 0:
            raise ConfigurationError("eval_cap must be > 0")
        return self


@dataclass
class SolverConfig:
    """Settings consumed by :func:`arap.solve_arap`."""

    max_iterations: int = 500
    gradient_tolerance: float = 1e-8
    use_isometry_box: bool = True
    d_sigma: float = 1.0
    depth_floor: float = 1e-4
    initial_step: float = 1.0
    armijo_c: float = 1e-4
    max_backtracks: int = 60
    random_seed: int = 0


@dataclass
class RefineConfig:
    """Settings consumed by the plane-refinement stage."""

    lambda1: float = 0.1
    sigma1: float = 0.5
    sigma2: float = 0.5
    particles_per_move: int = 10
    moves: int = 5
    perturb_sigma_normal: float = DEG5
    perturb_sigma_depth: float = 0.05
    unary_weight: float = 1.0
    trws_max_passes: int = 50
    trws_tolerance: float = 1e-6
    random_seed: int = 0


def solver_config(cfg: RunConfig) -> SolverConfig:
    return SolverConfig(
        max_iterations=cfg.max_iterations,
        gradient_tolerance=cfg.gradient_tolerance,
        use_isometry_box=cfg.use_isometry_box,
        d_sigma=cfg.d_sigma,
        depth_floor=cfg.depth_floor,
        initial_step=cfg.initial_step,
        armijo_c=cfg.armijo_c,
        max_backtracks=cfg.max_backtracks,
        random_seed=cfg.seed,
    )


def refine_config(cfg: RunConfig) -> RefineConfig:
    return RefineConfig(
        lambda1=cfg.lambda1,
        sigma1=cfg.sigma1,
        sigma2=cfg.sigma2,
        particles_per_move=cfg.particles_per_move,
        moves=cfg.moves,
        perturb_sigma_normal=cfg.perturb_sigma_normal,
        perturb_sigma_depth=cfg.perturb_sigma_depth,
        unary_weight=cfg.unary_weight,
        trws_max_passes=cfg.trws_max_passes,
        trws_tolerance=cfg.trws_tolerance,
        random_seed=cfg.seed,
    )


def config_field_types() -> dict[str, type]:
    """Mapping of RunConfig field name -> python type (for parsers/CLI)."""
    base = RunConfig()
    return {f.name: type(getattr(base, f.name)) for f in fields(RunConfig)}
