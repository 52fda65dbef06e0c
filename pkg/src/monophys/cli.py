"""Command-line entry point: generate, fit, eval, gradcheck, render.

Exit codes: 0 success, 1 numerical failure (divergence/NaN/failed check),
2 usage or configuration error.  All outputs are static files (PNG, CSV,
JSON, PLY); in deterministic mode every command is idempotent on identical
inputs, byte for byte, except for the timestamp confined to the run.log
header line.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import torch

from . import checks, eval as evaluation, report
from .diff_engine import set_deterministic
from .mpm_sim import SimulationAbort
from .optimizer import run_fit
from .synth_data import (GenerationSpec, SceneBundle, generate_scene,
                         validate_bundle)


class UsageError(Exception):
    """Invalid invocation or configuration (exit code 2)."""


class NumericalError(Exception):
    """Simulation divergence, non-finite values, failed checks (exit 1)."""


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------

def cmd_generate(args: argparse.Namespace) -> int:
    config_path = Path(args.config)
    if not config_path.is_file():
        raise UsageError(f"config file not found: {config_path}")
    try:
        with open(config_path) as f:
            raw = json.load(f)
    except json.JSONDecodeError as e:
        raise UsageError(f"config is not valid JSON: {e}") from None
    try:
        spec = GenerationSpec.from_json(raw)
    except (ValueError, TypeError) as e:
        raise UsageError(f"config: {e}") from None
    try:
        generate_scene(spec, args.seed, args.out)
    except SimulationAbort as e:
        raise NumericalError(f"generation simulation diverged: {e}") from None
    print(f"bundle written to {args.out}")
    return 0


def cmd_fit(args: argparse.Namespace) -> int:
    problems = validate_bundle(args.bundle)
    if problems:
        for p in problems:
            print(f"bundle {args.bundle}: {p}", file=sys.stderr)
        raise UsageError("incomplete bundle")
    if args.scale_init <= 0.0:
        raise UsageError(f"--scale-init must be positive, got {args.scale_init}")
    bundle = SceneBundle.load(args.bundle)
    try:
        run_fit(bundle, out_dir=args.out,
                scale_init=args.scale_init,
                use_sil=not args.no_sil,
                use_flow=not args.no_flow,
                use_distr=not args.no_distr,
                seed=0)
    except SimulationAbort as e:
        raise NumericalError(f"simulation diverged: {e}") from None
    print(f"run directory written to {args.out}")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    run = Path(args.run)
    problems = validate_bundle(args.bundle)
    if problems:
        for p in problems:
            print(f"bundle {args.bundle}: {p}", file=sys.stderr)
        raise UsageError("incomplete bundle")
    for name in ("config.json", "final_params.json"):
        if not (run / name).is_file():
            raise UsageError(f"run directory missing {name}: {run}")
    bundle = SceneBundle.load(args.bundle)
    with open(run / "config.json") as f:
        config = json.load(f)
    with open(run / "final_params.json") as f:
        final = json.load(f)

    n = bundle.n_frames
    ply_paths = [run / "trajectory" / f"{t:04d}.ply" for t in range(n)]
    png_paths = [run / "renders" / f"{t:04d}.png" for t in range(n)]
    missing = [str(p) for p in (*ply_paths, *png_paths) if not p.is_file()]
    if missing:
        raise UsageError(f"run directory missing artifacts: {missing[0]} "
                         f"(+{len(missing) - 1} more)" if len(missing) > 1
                         else f"run directory missing artifact: {missing[0]}")

    from .io_formats import read_ply, read_png
    pred_positions = [read_ply(p)[0] for p in ply_paths]
    pred_frames = [read_png(p) for p in png_paths]

    t_obs = int(config.get("n_obs", n))
    future = evaluation.future_prediction(pred_positions, pred_frames,
                                          bundle, t_obs)

    fit_params = {"E": final["E"], "nu": final["nu"], "v0": final["v0"]}
    gt_params = {"E": float(bundle.material.E), "nu": float(bundle.material.nu),
                 "v0": [float(v) for v in bundle.v0]}
    if "sigma_y" in final:
        fit_params["sigma_y"] = final["sigma_y"]
    if bundle.material.sigma_y is not None:
        gt_params["sigma_y"] = float(bundle.material.sigma_y)
    mae = evaluation.param_mae(fit_params, gt_params)

    # perturb_init scales the initial geometry by scale_init about the camera
    # origin, so the true global scale for the fit is 1/scale_init
    s_fit = float(final["s"])
    s_true = 1.0 / float(config.get("scale_init", 1.0))
    row = {
        "scene": Path(args.bundle).name,
        "seed": bundle.seed,
        "config": run.name,
        "chamfer_1e-4m2": future["mean_chamfer_1e-4m2"],
        "emd_m2": future["mean_emd_m2"],
        "psnr_db": future["mean_psnr_db"],
        "ssim": future["mean_ssim"],
        **mae.to_dict(),
        "scale_abs_log_error": evaluation.scale_error(s_fit, s_true),
    }
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    evaluation.write_metrics_csv(out, [row])

    fig_dir = out.parent
    if (run / "losses.csv").is_file():
        report.plot_loss_curves(run, fig_dir / f"{run.name}_losses.png")
        report.plot_param_trace(run, fig_dir / f"{run.name}_params.png",
                                truth={"E": gt_params["E"],
                                       "nu": gt_params["nu"],
                                       "v0": gt_params["v0"],
                                       "s": s_true,
                                       **({"sigma_y": gt_params["sigma_y"]}
                                          if "sigma_y" in gt_params else {})})
    print(f"metrics written to {out}")
    for key in ("chamfer_1e-4m2", "emd_m2", "psnr_db", "ssim"):
        print(f"  {key}: {row[key]:.6g}")
    return 0


def cmd_gradcheck(args: argparse.Namespace) -> int:
    results = checks.run_level(args.level, seed=args.seed, log=print)
    for r in results:
        print(r.line())
    failures = [r for r in results if not r.passed]
    if failures:
        worst = max(failures, key=lambda r: r.worst / r.tol)
        print(f"worst offender: {worst.name} at {worst.worst:.3e} "
              f"(tolerance {worst.tol:.1e})", file=sys.stderr)
        raise NumericalError(f"{len(failures)} check(s) failed at level "
                             f"'{args.level}'")
    print(f"all {len(results)} checks passed at level '{args.level}'")
    return 0


def cmd_render(args: argparse.Namespace) -> int:
    run = Path(args.run)
    if not (run / "config.json").is_file():
        raise UsageError(f"run directory missing config.json: {run}")
    with open(run / "config.json") as f:
        config = json.load(f)
    bundle_root = args.bundle or config.get("bundle")
    if not bundle_root:
        raise UsageError("no bundle: pass --bundle or run a fit whose "
                         "config.json records one")
    problems = validate_bundle(bundle_root)
    if problems:
        for p in problems:
            print(f"bundle {bundle_root}: {p}", file=sys.stderr)
        raise UsageError("incomplete bundle")
    bundle = SceneBundle.load(bundle_root)

    text = args.frames
    try:
        if ".." in text:
            a_s, b_s = text.split("..", 1)
            a, b = int(a_s), int(b_s)
        else:
            a = b = int(text)
    except ValueError:
        raise UsageError(f"--frames expects 'a..b' or 'a', got {text!r}") \
            from None
    if a > b:
        raise UsageError(f"--frames range is empty: {a} > {b}")
    if a < 0 or b >= bundle.n_frames:
        raise UsageError(f"--frames {a}..{b} outside bundle range "
                         f"0..{bundle.n_frames - 1}")
    for t in range(a, b + 1):
        if not (run / "renders" / f"{t:04d}.png").is_file():
            raise UsageError(f"run directory missing renders/{t:04d}.png")

    paths = report.emit_comparison_strips(bundle, run, range(a, b + 1))
    print(f"{len(paths)} comparison strips written to {paths[0].parent}")
    return 0


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------

def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="monophys",
        description="Recover scale, geometry, and material parameters of a "
                    "deformable object from single-camera video.")
    parser.add_argument("--deterministic", action="store_true", default=False,
                        help="force deterministic reductions everywhere")
    parser.add_argument("--jobs", type=int, default=None, metavar="N",
                        help="bound worker threads (fallback: env "
                             "MONOPHYS_THREADS)")
    sub = parser.add_subparsers(dest="command", required=True)

    # Subcommands accept the global flags after the command name too; the
    # SUPPRESS default keeps the top-level value when absent.
    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--deterministic", action="store_true",
                       default=argparse.SUPPRESS, help=argparse.SUPPRESS)
        p.add_argument("--jobs", type=int, default=argparse.SUPPRESS,
                       metavar="N", help=argparse.SUPPRESS)

    p = sub.add_parser("generate", help="synthesize a scene bundle")
    p.add_argument("--config", required=True, help="generation spec JSON")
    p.add_argument("--out", required=True, help="bundle output directory")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_generate)
    common(p)

    p = sub.add_parser("fit", help="fit physics/geometry/scale to a bundle")
    p.add_argument("--bundle", required=True, help="scene bundle directory")
    p.add_argument("--out", required=True, help="run output directory")
    p.add_argument("--scale-init", type=float, default=1.0, metavar="F",
                   help="initial-geometry scale perturbation (fit should "
                        "recover s = 1/F)")
    p.add_argument("--no-sil", action="store_true",
                   help="drop the silhouette loss term")
    p.add_argument("--no-flow", action="store_true",
                   help="drop the optical-flow loss term")
    p.add_argument("--no-distr", action="store_true",
                   help="drop the distribution regularizer")
    p.set_defaults(func=cmd_fit)
    common(p)

    p = sub.add_parser("eval", help="score a fit run against its bundle")
    p.add_argument("--run", required=True, help="fit run directory")
    p.add_argument("--bundle", required=True, help="scene bundle directory")
    p.add_argument("--out", required=True, help="metrics CSV path")
    p.set_defaults(func=cmd_eval)
    common(p)

    p = sub.add_parser("gradcheck", help="run one level of numerical checks")
    p.add_argument("--level", required=True,
                   choices=("unit", "sim", "render", "losses"))
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)
    common(p)

    p = sub.add_parser("render",
                       help="emit observed-vs-rendered comparison strips")
    p.add_argument("--run", required=True, help="fit run directory")
    p.add_argument("--frames", required=True, metavar="a..b",
                   help="inclusive frame range, e.g. 0..23")
    p.add_argument("--bundle", default=None,
                   help="bundle directory (default: the one recorded in the "
                        "run's config.json)")
    p.set_defaults(func=cmd_render)
    common(p)

    return parser


def _apply_global_flags(args: argparse.Namespace) -> None:
    jobs = args.jobs
    if jobs is None:
        env = os.environ.get("MONOPHYS_THREADS")
        if env is not None:
            try:
                jobs = int(env)
            except ValueError:
                raise UsageError(
                    f"MONOPHYS_THREADS is not an integer: {env!r}") from None
    if jobs is not None:
        if jobs < 1:
            raise UsageError(f"--jobs must be >= 1, got {jobs}")
        torch.set_num_threads(jobs)
    if args.deterministic:
        set_deterministic(True)


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        _apply_global_flags(args)
        return args.func(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
