"""Command-line interface.

Subcommands: propagate one frame, chain a sequence, generate a synthetic
scene, evaluate a depth map, sweep a parameter, and check the analytic
gradient. Every run that writes files also writes a JSON manifest with the
resolved configuration and SHA-256 checksums of inputs and outputs; the
manifest carries no timestamps so reruns are byte-identical.

Exit codes: 0 success, 1 bad input or configuration, 2 numerical failure,
3 unusable depth prior.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import arap, fileio, synthetic
from .config import RunConfig, config_field_types
from .errors import (ConfigurationError, DomainError, EmptyEvaluationError,
                     NumericalFailureError, ParseError, UnusablePriorError)
from .evaluation import error_accumulation, mre, run_sweep
from .pipeline import SceneFrame, propagate_depth, propagate_multiframe

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INPUT = 1
EXIT_NUMERICAL = 2
EXIT_PRIOR = 3


# ---------------------------------------------------------------------------
# Argument plumbing
# ---------------------------------------------------------------------------

def _global_parent() -> argparse.ArgumentParser:
    parent = argparse.ArgumentParser(add_help=False)
    group = parent.add_argument_group("run options")
    group.add_argument("--config", metavar="FILE",
                       help="key=value configuration file")
    group.add_argument("--seed", type=int, metavar="N",
                       help="override the random seed")
    group.add_argument("--threads", type=int, default=1, metavar="N",
                       help="worker threads for image codecs")
    group.add_argument("--verbose", action="store_true",
                       help="chatty progress logging")
    override = parent.add_argument_group(
        "configuration overrides (see 'key=value' config keys)")
    for name in config_field_types():
        if name == "seed":
            continue
        override.add_argument(f"--{name}", dest=f"opt_{name}", metavar="V")
    return parent


def _load_config(args) -> RunConfig:
    config = fileio.read_config(args.config) if args.config else RunConfig()
    overrides = {}
    types = config_field_types()
    for name, kind in types.items():
        raw = getattr(args, f"opt_{name}", None)
        if raw is None:
            continue
        try:
            overrides[name] = fileio._parse_value(kind, raw)
        except ValueError as exc:
            raise ConfigurationError(f"bad value for --{name}: {raw!r}") from exc
    if args.seed is not None:
        overrides["seed"] = args.seed
    if overrides:
        config = replace(config, **overrides)
    config.validate()
    return config


def _sha256(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _write_manifest(path, command: str, config: RunConfig, inputs, outputs):
    """Checksummed record of a run; carries no timestamps or machine state.

    Paths are stored relative to the manifest itself when possible so that
    reruns into a different directory still produce identical bytes.
    """
    base = Path(path).resolve().parent

    def rel(p):
        try:
            return Path(os.path.relpath(Path(p).resolve(), base)).as_posix()
        except ValueError:
            return str(p)

    manifest = {
        "command": command,
        "config": asdict(config),
        "inputs": {rel(p): _sha256(p) for p in inputs},
        "outputs": {rel(p): _sha256(p) for p in outputs},
    }
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(manifest, sort_keys=True, indent=2) + "\n")


def _read_depth(path, config: RunConfig, intrinsics):
    return fileio.read_pfm(path, convention=config.depth_convention,
                           intrinsics=intrinsics)


def _write_depth(path, depth, config: RunConfig, intrinsics):
    fileio.write_pfm(path, depth, convention=config.depth_convention,
                     intrinsics=intrinsics)


def _read_list(path):
    entries = []
    base = Path(path).parent
    with open(path, "r", encoding="utf-8") as fh:
        for raw in fh:
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            p = Path(line)
            entries.append(p if p.is_absolute() else base / p)
    if not entries:
        raise ParseError("empty file list", path=str(path), offset=0)
    return entries


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def _cmd_propagate(args) -> int:
    config = _load_config(args)
    intr = fileio.read_intrinsics(args.intrinsics)
    ref_image = fileio.read_image(args.ref_image)
    next_image = fileio.read_image(args.next_image)
    flow = fileio.read_flo(args.flow)
    prior = _read_depth(args.ref_depth, config, intr)

    ref = SceneFrame(ref_image, intr, prior)
    result = propagate_depth(ref, next_image, flow, config)

    out = Path(args.out_depth)
    out.parent.mkdir(parents=True, exist_ok=True)
    _write_depth(out, result.next_depth, config, intr)
    outputs = [out]

    if args.trace_csv:
        report = result.solve_report
        rows = [(i, e, s, g) for i, (e, s, g) in enumerate(
            zip(report.energy_trace, report.step_sizes, report.pg_norms))]
        fileio.write_csv(args.trace_csv,
                         ("iteration", "energy", "step_size",
                          "projected_gradient_norm"), rows)
        outputs.append(Path(args.trace_csv))
    if args.refine_csv:
        rows = []
        for move in result.refine_trace.moves:
            for p, bound in enumerate(move.lower_bounds):
                rows.append((move.move, p, bound, move.energy_before,
                             move.energy_after, move.source))
        fileio.write_csv(args.refine_csv,
                         ("move", "trws_pass", "lower_bound", "energy_before",
                          "energy_after", "selection"), rows)
        outputs.append(Path(args.refine_csv))

    manifest = Path(args.manifest) if args.manifest \
        else out.with_suffix(out.suffix + ".manifest.json")
    inputs = [args.ref_image, args.next_image, args.flow, args.ref_depth,
              args.intrinsics]
    _write_manifest(manifest, "propagate", config, inputs, outputs)
    print(f"wrote {out} ({result.solve_report.iterations_used} solver "
          f"iterations, {len(result.refine_trace.moves)} refinement moves)")
    return EXIT_OK


def _cmd_multiframe(args) -> int:
    config = _load_config(args)
    intr = fileio.read_intrinsics(args.intrinsics)
    image_paths = _read_list(args.frames)
    flow_paths = _read_list(args.flows)
    gt_paths = _read_list(args.gt_depths) if args.gt_depths else None
    if gt_paths is not None and len(gt_paths) != len(image_paths):
        raise DomainError(
            f"{len(image_paths)} frames but {len(gt_paths)} ground-truth maps")

    frames = []
    for i, p in enumerate(image_paths):
        depth = None
        if i == 0:
            depth = _read_depth(args.ref_depth, config, intr)
        elif gt_paths is not None:
            depth = _read_depth(gt_paths[i], config, intr)
        frames.append(SceneFrame(fileio.read_image(p), intr, depth))
    flows = [fileio.read_flo(p) for p in flow_paths]

    results = propagate_multiframe(frames, flows, config)

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    outputs = []
    for i, result in enumerate(results):
        path = out_dir / f"depth_{i + 1:04d}.pfm"
        _write_depth(path, result.next_depth, config, intr)
        outputs.append(path)
    if gt_paths is not None:
        errors = [r.diagnostics.mre_vs_ground_truth for r in results]
        header, rows = error_accumulation(errors)
        path = out_dir / "accumulation.csv"
        fileio.write_csv(path, header, rows)
        outputs.append(path)

    inputs = [args.frames, args.flows, args.ref_depth, args.intrinsics]
    inputs += image_paths + flow_paths + (gt_paths or [])
    _write_manifest(out_dir / "manifest.json", "multiframe", config, inputs,
                    outputs)
    print(f"wrote {len(results)} propagated depth maps to {out_dir}")
    return EXIT_OK


def _cmd_synth(args) -> int:
    config = _load_config(args)
    spec = synthetic.scene_spec_from_file(args.scene) if args.scene \
        else synthetic.SceneSpec(seed=config.seed)
    if args.amplitude is not None:
        spec = replace(spec, amplitude=float(args.amplitude))
    if args.frames is not None:
        spec = replace(spec, frames=int(args.frames))
    scene = synthetic.generate_scene(spec)

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    outputs = []
    for t, image in enumerate(scene.images):
        path = out_dir / f"frame_{t:04d}.png"
        fileio.write_image(path, image, bits=16)
        outputs.append(path)
    for t, depth in enumerate(scene.depths):
        path = out_dir / f"depth_{t:04d}.pfm"
        _write_depth(path, depth, config, scene.intrinsics)
        outputs.append(path)
    for t, flow in enumerate(scene.flows):
        path = out_dir / f"flow_{t:04d}.flo"
        fileio.write_flo(path, flow)
        outputs.append(path)
    intr_path = out_dir / "intrinsics.txt"
    fileio.write_intrinsics(intr_path, scene.intrinsics)
    outputs.append(intr_path)

    inputs = [args.scene] if args.scene else []
    _write_manifest(out_dir / "manifest.json", "synth", config, inputs,
                    outputs)
    print(f"wrote {spec.frames} frames to {out_dir} "
          f"(flow consistency {scene.flow_residual_px:.3e} px)")
    return EXIT_OK


def _cmd_eval(args) -> int:
    config = _load_config(args)
    intr = fileio.read_intrinsics(args.intrinsics) if args.intrinsics else None
    estimate = fileio.read_pfm(args.estimate,
                               convention=config.depth_convention,
                               intrinsics=intr)
    truth = fileio.read_pfm(args.truth, convention=config.depth_convention,
                            intrinsics=intr)
    cap = config.eval_cap if config.eval_cap_enabled else None
    report = mre(estimate, truth, cap=cap)
    print(f"mre={report.mre!r} valid_pixels={report.valid_pixels}")
    return EXIT_OK


def _cmd_sweep(args) -> int:
    config = _load_config(args)
    spec = synthetic.scene_spec_from_file(args.scene) if args.scene \
        else synthetic.SceneSpec(seed=config.seed,
                                 amplitude=args.amplitude or 0.0)
    scene = synthetic.generate_scene(spec)
    try:
        values = [float(v) for v in args.values.split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigurationError(f"bad sweep values {args.values!r}") from exc
    header, rows = run_sweep(args.parameter, values, scene, config,
                             repetitions=args.repetitions)
    out = Path(args.out_csv)
    out.parent.mkdir(parents=True, exist_ok=True)
    fileio.write_csv(out, header, rows)
    _write_manifest(out.with_suffix(".manifest.json"), "sweep", config,
                    [args.scene] if args.scene else [], [out])
    print(f"wrote sweep of {args.parameter} over {len(values)} values to {out}")
    return EXIT_OK


def _cmd_gradcheck(args) -> int:
    config = _load_config(args)
    worst = 0.0
    for i in range(args.instances):
        problem, depths = arap.random_problem(config.seed + i,
                                              n_points=args.points)
        analytic = arap.arap_gradient(problem, depths)
        numeric = arap.finite_difference_gradient(problem, depths,
                                                  h=args.step)
        scale = max(float(np.linalg.norm(analytic)), 1e-12)
        err = float(np.linalg.norm(analytic - numeric)) / scale
        worst = max(worst, err)
    ok = worst < args.tolerance
    print(f"gradient check: {args.instances} instances, "
          f"max relative error {worst:.3e} "
          f"({'below' if ok else 'ABOVE'} tolerance {args.tolerance:g})")
    return EXIT_OK if ok else EXIT_NUMERICAL


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parent = _global_parent()
    parser = argparse.ArgumentParser(
        prog="arapdepth",
        description="Propagate a dense depth map across frames using optical "
                    "flow, a piecewise-planar superpixel model, and an "
                    "as-rigid-as-possible solver.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("propagate", parents=[parent],
                       help="propagate depth one frame forward")
    p.add_argument("--ref-image", required=True)
    p.add_argument("--next-image", required=True)
    p.add_argument("--flow", required=True)
    p.add_argument("--ref-depth", required=True)
    p.add_argument("--intrinsics", required=True)
    p.add_argument("--out-depth", required=True)
    p.add_argument("--manifest")
    p.add_argument("--trace-csv")
    p.add_argument("--refine-csv")
    p.set_defaults(func=_cmd_propagate)

    p = sub.add_parser("multiframe", parents=[parent],
                       help="chain propagation along a sequence")
    p.add_argument("--frames", required=True,
                   help="text file listing frame images, one per line")
    p.add_argument("--flows", required=True,
                   help="text file listing .flo files, one per line")
    p.add_argument("--ref-depth", required=True)
    p.add_argument("--intrinsics", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--gt-depths",
                   help="optional list of ground-truth depth maps")
    p.set_defaults(func=_cmd_multiframe)

    p = sub.add_parser("synth", parents=[parent],
                       help="generate a synthetic scene with exact labels")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--scene", help="scene spec file (key=value)")
    p.add_argument("--amplitude", type=float,
                   help="object deformation amplitude")
    p.add_argument("--frames", type=int, help="number of frames")
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("eval", parents=[parent],
                       help="mean relative error between two depth maps")
    p.add_argument("--estimate", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--intrinsics")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("sweep", parents=[parent],
                       help="sweep one parameter on a synthetic scene")
    p.add_argument("--parameter", required=True)
    p.add_argument("--values", required=True,
                   help="comma-separated numeric values")
    p.add_argument("--out-csv", required=True)
    p.add_argument("--repetitions", type=int, default=3)
    p.add_argument("--scene", help="scene spec file (key=value)")
    p.add_argument("--amplitude", type=float)
    p.set_defaults(func=_cmd_sweep)

    p = sub.add_parser("gradcheck", parents=[parent],
                       help="compare the analytic energy gradient against "
                            "finite differences")
    p.add_argument("--instances", type=int, default=100)
    p.add_argument("--points", type=int, default=24)
    p.add_argument("--step", type=float, default=1e-6)
    p.add_argument("--tolerance", type=float, default=1e-5)
    p.set_defaults(func=_cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        code = exc.code if isinstance(exc.code, int) else 1
        return EXIT_OK if code == 0 else EXIT_INPUT

    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s")
    try:
        import cv2
        cv2.setNumThreads(max(1, args.threads))
    except Exception:  # pragma: no cover - codec tuning is best-effort
        pass

    try:
        return args.func(args)
    except UnusablePriorError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PRIOR
    except NumericalFailureError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ParseError, DomainError, ConfigurationError,
            EmptyEvaluationError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
