"""
MLMC Blind Super-Resolution - Main Application

This is the main entry point for the blind super-resolution solver. It
provides a command-line interface with one subcommand per workflow:

    synth      degrade an HR image with a random kernel (test-case generation)
    solve      estimate the HR image and blur kernel behind LR image(s)
    eval       score an SR image / estimated kernel against ground truth
    gradcheck  finite-difference check of every differentiable op
    bench      seeded synthetic scenarios under solver ablations
    config     print the effective configuration

Exit codes: 0 success, 1 usage or input error, 2 numerical abort or
gradient-check failure.
"""

import argparse
import sys
from collections import defaultdict
from dataclasses import replace
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np

from src.config import (
    SEED,
    SolverConfig,
    dump_config_file,
    load_config_file,
    parse_config_lines,
    print_config_status,
)
from src.pipeline import (
    BENCH_VARIANTS,
    DEFAULT_BENCH_VARIANTS,
    SYNTH_MODES,
    SuperResolutionPipeline,
    default_out_dir,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_NUMERICAL = 2

# CLI flag -> SolverConfig field
_FLAG_FIELDS = {
    "scale": "scale",
    "seed": "seed",
    "noise": "noise_sigma",
    "iters": "iters",
    "mc_steps": "mc_steps",
    "meta_steps": "meta_steps",
    "image_steps": "image_steps",
    "samples": "mc_samples",
    "lr_kernel": "gamma_mc",
    "lr_meta": "gamma_ml",
    "lr_image": "gamma_x",
    "epsilon": "epsilon",
    "rho": "rho_reg",
    "eta": "eta",
    "depth": "restorer_depth",
    "channels": "restorer_channels",
    "kernel_hidden": "kernel_hidden",
    "kernel_family": "kernel_family",
    "kernel_peak": "kernel_psnr_peak",
    "log_every": "log_every",
}

_SWITCH_FIELDS = {
    "no_mc": "no_mc",
    "no_meta": "no_meta",
    "no_kernel": "no_kernel",
    "ood": "ood_kernels",
    "full_unroll": "full_unroll",
    "bicubic_warm_start": "bicubic_warm_start",
    "normalize_weights": "normalize_weights",
    "vary_kernel_size": "vary_kernel_size",
}


class UsageError(Exception):
    """Bad command-line usage; reported with exit code 1."""


class _ArgumentParser(argparse.ArgumentParser):
    """argparse with usage errors mapped to exit code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(EXIT_USAGE)


def print_banner(title: str):
    """Display a section banner."""
    print("\n" + "=" * 70)
    print(f"  {title}")
    print("=" * 70)


def print_result(result: Dict[str, Any], success_title: str, failure_title: str):
    """Print the outcome box of a pipeline result."""
    print("\n" + "=" * 70)
    if result["success"]:
        print(f"✓ {success_title}")
    else:
        print(f"✗ {failure_title}")
        print("=" * 70)
        print(f"\nError: {result.get('error', 'Unknown error')}")
        if result.get("diagnostics"):
            print(f"Diagnostics: {result['diagnostics']}")
    print(f"Message: {result.get('message', '')}")
    print("=" * 70)


def exit_code(result: Dict[str, Any]) -> int:
    """0 on success, 2 for numerical failures, 1 otherwise."""
    if result["success"]:
        return EXIT_OK
    return EXIT_NUMERICAL if result.get("aborted") else EXIT_USAGE


# =============================================================================
# Arguments
# =============================================================================

def _add_solver_arguments(parser: argparse.ArgumentParser):
    group = parser.add_argument_group("solver configuration (override --config)")
    group.add_argument("--config", help="flat 'key = value' config file")
    group.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override any config key (repeatable)")
    group.add_argument("--scale", type=int, help="scale factor s")
    group.add_argument("--seed", type=int, help=f"seed (default MLMC_SEED={SEED})")
    group.add_argument("--noise", type=float, help="AWGN sigma as a fraction of the peak value")
    group.add_argument("--iters", type=int, help="outer iterations I")
    group.add_argument("--mc-steps", type=int, help="MCKA steps L")
    group.add_argument("--meta-steps", type=int, help="meta-updates Q")
    group.add_argument("--image-steps", type=int, help="image steps P per meta-update")
    group.add_argument("--samples", type=int, help="Monte Carlo kernels T")
    group.add_argument("--lr-kernel", type=float, help="kernel learning rate in MCKA")
    group.add_argument("--lr-meta", type=float, help="kernel learning rate in MLAO")
    group.add_argument("--lr-image", type=float, help="image learning rate")
    group.add_argument("--epsilon", type=float, help="Monte Carlo weight stabilizer")
    group.add_argument("--rho", type=float, help="hyper-Laplacian weight (0 disables)")
    group.add_argument("--eta", type=float, help="hyper-Laplacian exponent")
    group.add_argument("--depth", type=int, help="image restorer depth")
    group.add_argument("--channels", type=int, help="image restorer channels")
    group.add_argument("--kernel-hidden", type=int, help="kernel generator hidden width")
    group.add_argument("--kernel-family", choices=("gaussian", "motion"), help="Monte Carlo kernel family")
    group.add_argument("--kernel-peak", choices=("gt_max", "one"), help="kernel PSNR peak convention")
    group.add_argument("--log-every", type=int, help="INFO progress every N iterations")
    group.add_argument("--no-mc", action="store_true", help="ablation: skip Monte Carlo kernel approximation")
    group.add_argument("--no-meta", action="store_true", help="ablation: greedy kernel steps instead of meta-updates")
    group.add_argument("--no-kernel", action="store_true", help="ablation: freeze the kernel generator")
    group.add_argument("--ood", action="store_true", help="use the wider out-of-distribution width range")
    group.add_argument("--full-unroll", action="store_true", help="rebuild the kernel graph at every image step")
    group.add_argument("--bicubic-warm-start", action="store_true",
                       help="use the bicubic upsample as x in the first Monte Carlo weighting")
    group.add_argument("--normalize-weights", action="store_true", help="normalize Monte Carlo weights to sum 1")
    group.add_argument("--vary-kernel-size", action="store_true", help="draw Monte Carlo kernels of varying support")


def build_config(args: argparse.Namespace) -> SolverConfig:
    """
    Effective config: defaults <- config file <- --set overrides <- explicit flags.

    Raises:
        UsageError: Unreadable config file, bad override or invalid resulting config.
    """
    try:
        cfg = load_config_file(args.config) if getattr(args, "config", None) else SolverConfig()
        overrides = getattr(args, "set", [])
        if overrides:
            cfg = parse_config_lines(overrides, cfg)
    except ValueError as e:
        raise UsageError(str(e)) from e

    updates = {}
    for flag, name in _FLAG_FIELDS.items():
        value = getattr(args, flag, None)
        if value is not None:
            updates[name] = value
    for flag, name in _SWITCH_FIELDS.items():
        if getattr(args, flag, False):
            updates[name] = True
    cfg = replace(cfg, **updates)

    validation = cfg.validate()
    if not validation["valid"]:
        raise UsageError("Invalid configuration:\n  - " + "\n  - ".join(validation["errors"]))
    return cfg


def build_parser() -> argparse.ArgumentParser:
    parser = _ArgumentParser(
        prog="main.py",
        description="Blind single-image super-resolution with Monte Carlo kernel approximation "
                    "and meta-learned alternating optimization.",
    )
    commands = parser.add_subparsers(dest="command", required=True, parser_class=_ArgumentParser)

    synth = commands.add_parser("synth", help="synthesize an LR test case from an HR image")
    synth.add_argument("hr", help="HR image (PNG, PGM or PPM)")
    synth.add_argument("--out", help="output directory")
    synth.add_argument("--mode", choices=SYNTH_MODES, default="gaussian", help="kernel mode")
    _add_solver_arguments(synth)

    solve = commands.add_parser("solve", help="estimate the HR image and kernel behind LR image(s)")
    solve.add_argument("lr", nargs="+", help="LR image(s) or synth output directories")
    solve.add_argument("--out", help="output directory (one subdirectory per image when several)")
    solve.add_argument("--gt-hr", help="ground-truth HR image (single input only)")
    solve.add_argument("--gt-kernel", help="ground-truth kernel text matrix (single input only)")
    solve.add_argument("--init-from", help="directory of saved networks to start from")
    solve.add_argument("--jobs", type=int, default=1, help="worker processes for several inputs")
    _add_solver_arguments(solve)

    evaluate = commands.add_parser("eval", help="score an SR image against ground truth")
    evaluate.add_argument("sr", help="SR image or solve output directory")
    evaluate.add_argument("hr", help="HR image or synth output directory")
    evaluate.add_argument("--kest", help="estimated kernel text matrix")
    evaluate.add_argument("--kgt", help="ground-truth kernel text matrix")
    evaluate.add_argument("--luma", action="store_true", help="also report PSNR on the luma channel")
    evaluate.add_argument("--csv", help="metric CSV path (default: eval.csv next to the SR image)")
    evaluate.add_argument("--kernel-peak", choices=("gt_max", "one"), help="kernel PSNR peak convention")

    gradcheck = commands.add_parser("gradcheck", help="finite-difference check of every op")
    gradcheck.add_argument("--seed", type=int, default=None, help=f"seed (default MLMC_SEED={SEED})")
    gradcheck.add_argument("--trials", type=int, default=20, help="random draws per op")

    bench = commands.add_parser("bench", help="seeded synthetic scenarios under solver ablations")
    bench.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4], help="scenario seeds")
    bench.add_argument("--variants", nargs="+", choices=BENCH_VARIANTS, default=list(DEFAULT_BENCH_VARIANTS))
    bench.add_argument("--hr-size", type=int, default=128, help="side of the synthetic HR scene")
    bench.add_argument("--out", help="output directory")
    bench.add_argument("--jobs", type=int, default=1, help="worker processes")
    _add_solver_arguments(bench)

    config = commands.add_parser("config", help="print the effective configuration")
    config.add_argument("--dump", help="also write it as a config file")
    _add_solver_arguments(config)

    return parser


# =============================================================================
# Commands
# =============================================================================

def cmd_synth(args: argparse.Namespace) -> int:
    cfg = build_config(args)
    print_banner("SYNTHESIZE TEST CASE")
    out_dir = Path(args.out) if args.out else default_out_dir("synth")
    result = SuperResolutionPipeline(cfg).synthesize(args.hr, out_dir, args.mode)
    if result["success"]:
        for name, path in result["outputs"].items():
            print(f"  {name}: {path}")
    print_result(result, "TEST CASE WRITTEN", "SYNTHESIS FAILED")
    return exit_code(result)


def cmd_solve(args: argparse.Namespace) -> int:
    cfg = build_config(args)
    if len(args.lr) > 1 and (args.gt_hr or args.gt_kernel or args.init_from):
        raise UsageError("--gt-hr, --gt-kernel and --init-from need a single LR input")
    if args.jobs < 1:
        raise UsageError(f"--jobs must be >= 1, got {args.jobs}")

    print_banner("BLIND SUPER-RESOLUTION")
    print(f"\n{len(args.lr)} input(s), ×{cfg.scale}, {cfg.iters} iterations, seed {cfg.seed}")
    out_dir = Path(args.out) if args.out else default_out_dir("solve")
    pipeline = SuperResolutionPipeline(cfg)

    if len(args.lr) == 1:
        results = [pipeline.solve(args.lr[0], out_dir, args.gt_hr, args.gt_kernel, args.init_from)]
    else:
        results = pipeline.solve_many(args.lr, out_dir, args.jobs)

    for result in results:
        if result["success"]:
            metrics = result["metrics"]
            print(f"\n  SR image: {result['outputs']['sr']}")
            print(f"  Kernel:   {result['outputs']['kernel_txt']}")
            print(f"  LR loss:  {metrics['initial_lr_loss']:.6g} -> {metrics['final_lr_loss']:.6g}")
            if "image_psnr" in metrics:
                print(f"  PSNR {metrics['image_psnr']:.2f} dB, SSIM {metrics['image_ssim']:.4f}, "
                      f"kernel PSNR {metrics['kernel_psnr']:.2f} dB (bicubic {metrics['bicubic_psnr']:.2f} dB)")
        print_result(result, "SOLVE COMPLETE", "SOLVE FAILED")
    return max(exit_code(result) for result in results)


def cmd_eval(args: argparse.Namespace) -> int:
    cfg = SolverConfig(kernel_psnr_peak=args.kernel_peak) if args.kernel_peak else SolverConfig()
    result = SuperResolutionPipeline(cfg).evaluate(args.sr, args.hr, args.kest, args.kgt, args.luma, args.csv)
    if result["success"]:
        metrics = result["metrics"]
        print(",".join(metrics.keys()))
        print(",".join(f"{value:.6f}" for value in metrics.values()))
    else:
        print_result(result, "", "EVALUATION FAILED")
    return exit_code(result)


def cmd_gradcheck(args: argparse.Namespace) -> int:
    if args.trials < 1:
        raise UsageError(f"--trials must be >= 1, got {args.trials}")
    seed = args.seed if args.seed is not None else SEED
    print_banner(f"GRADIENT CHECK (seed {seed}, {args.trials} trials per op)")
    result = SuperResolutionPipeline().gradcheck(seed, args.trials)

    print(f"\n{'op':<20}{'max rel. error':>16}  status")
    print("-" * 70)
    for name, error, passed in result["rows"]:
        print(f"{name:<20}{error:>16.3e}  {'✓ pass' if passed else '✗ FAIL'}")
    print("-" * 70)
    print(f"tolerance {result['tolerance']:.0e}: {result['message']}")
    return EXIT_OK if result["success"] else EXIT_NUMERICAL


def _mean(group: List[Dict[str, Any]], key: str) -> float:
    return float(np.mean([row[key] for row in group]))


def _pass_count(group: List[Dict[str, Any]]) -> str:
    passed = sum(1 for row in group if row.get("passed"))
    mark = "✓" if passed == len(group) else "✗"
    return f"{mark} {passed}/{len(group)}"


def _print_bench_summary(rows: List[Dict[str, Any]]):
    by_variant: Dict[str, List[Dict[str, Any]]] = defaultdict(list)
    for row in rows:
        by_variant[row["variant"]].append(row)

    print(f"\n{'variant':<14}{'bicubic':>9}{'PSNR':>9}{'kPSNR':>9}{'LR ratio':>11}{'time s':>9}{'params':>11}{'pass':>8}")
    print("-" * 80)
    for variant, group in by_variant.items():
        params = group[0]["kernel_params"] + group[0]["image_params"]
        print(f"{variant:<14}{_mean(group, 'bicubic_psnr'):>9.2f}{_mean(group, 'image_psnr'):>9.2f}"
              f"{_mean(group, 'kernel_psnr'):>9.2f}"
              f"{_mean(group, 'lr_loss_ratio'):>11.4f}{_mean(group, 'runtime_s'):>9.1f}{params:>11}"
              f"{_pass_count(group):>8}")

    def ordering(better: str, worse: str, key: str):
        pairs = {row["seed"]: row[key] for row in by_variant.get(worse, [])}
        wins = [row[key] >= pairs[row["seed"]] for row in by_variant.get(better, []) if row["seed"] in pairs]
        if wins:
            print(f"  {better} {key} >= {worse}: {sum(wins)}/{len(wins)} seeds")

    print("-" * 80)
    ordering("full", "no-mc", "kernel_psnr")
    ordering("full", "no-meta", "image_psnr")
    ordering("full", "no-kernel", "image_psnr")
    ordering("noise-hl", "noise-no-hl", "image_psnr")


def cmd_bench(args: argparse.Namespace) -> int:
    cfg = build_config(args)
    if args.jobs < 1:
        raise UsageError(f"--jobs must be >= 1, got {args.jobs}")
    print_banner("BENCH")
    out_dir = Path(args.out) if args.out else default_out_dir("bench")
    result = SuperResolutionPipeline(cfg).bench(args.seeds, out_dir, args.variants, args.hr_size, args.jobs)
    if result.get("rows"):
        _print_bench_summary(result["rows"])
    print_result(result, "BENCH COMPLETE", "BENCH FAILED")
    return exit_code(result)


def cmd_config(args: argparse.Namespace) -> int:
    cfg = build_config(args)
    print_config_status(cfg)
    if args.dump:
        print(f"\n✓ Written to {dump_config_file(cfg, args.dump)}")
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "solve": cmd_solve,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "bench": cmd_bench,
    "config": cmd_config,
}


def main(argv: Optional[List[str]] = None) -> int:
    """Parse arguments, run the command, return its exit code."""
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except UsageError as e:
        print(f"\n❌ {e}", file=sys.stderr)
        return EXIT_USAGE
    except KeyboardInterrupt:
        print("\n\n⚠️  Interrupted by user.")
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
