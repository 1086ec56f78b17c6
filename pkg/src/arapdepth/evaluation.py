"""Depth-map evaluation: mean relative error, noise injection, sweeps."""

from __future__ import annotations

import time
from dataclasses import dataclass, replace

import numpy as np

from .config import RunConfig
from .datatypes import DepthMap, require_same_shape
from .errors import DomainError, EmptyEvaluationError
from .pipeline import SceneFrame, propagate_depth

NOISE_DEPTH_FLOOR = 1e-4

SWEEP_PARAMETERS = ("superpixels", "knn", "d_sigma", "noise_percent")


@dataclass(frozen=True)
class MetricReport:
    mre: float
    valid_pixels: int


def mre(estimate: DepthMap, truth: DepthMap, cap: float = None) -> MetricReport:
    """Mean of |estimate - truth| / truth over mutually valid pixels.

    ``cap``, when given, clamps both maps from above before comparing
    (benchmark convention for far-field range sensors). Raises
    EmptyEvaluationError when no pixel is valid in both maps.
    """
    require_same_shape("estimate", estimate, "truth", truth)
    both = estimate.valid & truth.valid
    n = int(both.sum())
    if n == 0:
        raise EmptyEvaluationError("no pixel is valid in both depth maps")
    est = estimate.values[both]
    ref = truth.values[both]
    if cap is not None:
        if cap <= 0:
            raise DomainError(f"evaluation cap must be positive, got {cap}")
        est = np.minimum(est, cap)
        ref = np.minimum(ref, cap)
    value = float(np.mean(np.abs(est - ref) / ref))
    return MetricReport(mre=value, valid_pixels=n)


def add_depth_noise(depth: DepthMap, percent: float, seed: int) -> DepthMap:
    """Multiplicative Gaussian noise: d * (1 + (percent/100) * g), g ~ N(0,1).

    Values are clamped from below so the result stays a usable depth map;
    the validity mask is unchanged.
    """
    if percent < 0:
        raise DomainError(f"noise percent must be >= 0, got {percent}")
    rng = np.random.default_rng(seed)
    g = rng.standard_normal(depth.values.shape)
    noisy = depth.values * (1.0 + percent / 100.0 * g)
    noisy = np.maximum(noisy, NOISE_DEPTH_FLOOR)
    out = np.where(depth.valid, noisy, depth.values)
    return DepthMap(out, depth.valid.copy())


def sparse_prior_from_triples(depth: DepthMap, triples) -> DepthMap:
    """Restrict a depth map's validity to the anchor-triple pixels."""
    mask = np.zeros_like(depth.valid)
    for t in triples:
        px = t.pixels().astype(np.intp)
        mask[px[:, 1], px[:, 0]] = True
    mask &= depth.valid
    if not mask.any():
        raise EmptyEvaluationError("no triple pixel carries valid depth")
    return DepthMap(depth.values.copy(), mask)


SWEEP_HEADER = ("parameter", "value", "repetitions", "mre_mean", "mre_std",
                "wall_time_mean")


def run_sweep(parameter: str, values, scene, base_config: RunConfig,
              repetitions: int = 3):
    """Propagate frame 0 -> 1 of a scene across a parameter range.

    ``parameter`` is one of SWEEP_PARAMETERS; ``noise_percent`` perturbs the
    prior instead of the solver configuration. Returns (header, rows) where
    each row aggregates ``repetitions`` runs with distinct seeds.
    """
    if parameter not in SWEEP_PARAMETERS:
        raise DomainError(
            f"unknown sweep parameter {parameter!r}; "
            f"expected one of {', '.join(SWEEP_PARAMETERS)}")
    if repetitions < 1:
        raise DomainError("repetitions must be >= 1")
    values = list(values)
    if not values:
        raise DomainError("sweep needs at least one value")

    truth = scene.depths[1]
    rows = []
    for value in values:
        errors, times = [], []
        for rep in range(repetitions):
            seed = base_config.seed + rep
            config = replace(base_config, seed=seed)
            prior = scene.depths[0]
            if parameter == "noise_percent":
                prior = add_depth_noise(prior, float(value), seed)
            else:
                kind = type(getattr(base_config, parameter))
                config = replace(config, **{parameter: kind(value)})
            config.validate()
            ref = SceneFrame(scene.images[0], scene.intrinsics, prior)
            start = time.perf_counter()
            result = propagate_depth(ref, scene.images[1], scene.flows[0],
                                     config)
            elapsed = time.perf_counter() - start
            cap = config.eval_cap if config.eval_cap_enabled else None
            report = mre(result.next_depth, truth, cap=cap)
            errors.append(report.mre)
            times.append(elapsed)
        rows.append((parameter, float(value), repetitions,
                     float(np.mean(errors)), float(np.std(errors)),
                     float(np.mean(times))))
    return SWEEP_HEADER, rows


ACCUMULATION_HEADER = ("frame", "mre", "mre_increase")


def error_accumulation(per_frame_mre):
    """Tabulate per-frame MRE and its first difference along a sequence."""
    per_frame_mre = [float(x) for x in per_frame_mre]
    if not per_frame_mre:
        raise EmptyEvaluationError("no per-frame errors to tabulate")
    rows = []
    for i, value in enumerate(per_frame_mre):
        inc = float("nan") if i == 0 else value - per_frame_mre[i - 1]
        rows.append((i + 1, value, inc))
    return ACCUMULATION_HEADER, rows
