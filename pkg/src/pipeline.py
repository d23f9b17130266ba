"""
Super-Resolution Pipeline Module

This module orchestrates every workflow of the project, from synthesizing a
degraded test image to solving it and scoring the result. It integrates all
components of the system into a high-level API whose methods return result
dictionaries instead of raising, so the command line can map them to exit
codes.
"""

import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from src.config import LOG_LEVEL, OUTPUT_DIR, SolverConfig, dump_config_file
from src.degradation import (
    DegradationConfig,
    bicubic_upsample,
    degrade,
    kernel_psnr,
    luma_psnr,
    psnr,
    ssim,
)
from src.image_io import (
    center_crop,
    read_image,
    read_kernel_text,
    write_image,
    write_kernel_image,
    write_kernel_text,
)
from src.kernel_sampler import (
    check_kernel,
    delta_kernel,
    gaussian_kernel,
    motion_kernel,
    sample_gaussian_params,
)
from src.models import count_parameters
from src.run_manifest import RunManifest, is_run_dir
from src.solver import MLMCSolver, SolverAbort, write_trace_csv
from src.tensor_ad import GRADCHECK_TOLERANCE, run_gradcheck

# Configure logging
# Logging helps us track what's happening at each stage and debug issues
logging.basicConfig(
    level=getattr(logging, LOG_LEVEL, logging.INFO),
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
    datefmt='%Y-%m-%d %H:%M:%S'
)
logger = logging.getLogger(__name__)

# Smallest HR side accepted by synthesis
MIN_HR_SIDE = 32

SYNTH_MODES = ("gaussian", "ood", "motion", "delta")
BENCH_VARIANTS = ("full", "no-mc", "no-meta", "no-kernel", "noise-hl", "noise-no-hl")
DEFAULT_BENCH_VARIANTS = ("full", "no-mc", "no-meta")

# Seed stream offsets, so synthesis and scene drawing never share draws with the solver
_SYNTH_STREAM = 1
_SCENE_STREAM = 2

# Noise level of the noisy bench scenario (3.92% of the peak value)
BENCH_NOISE_SIGMA = 0.0392

# Desk-scale acceptance thresholds checked on every bench row
ACCEPT_LR_LOSS_RATIO = 0.1
ACCEPT_BICUBIC_MARGIN_DB = 0.5
ACCEPT_KERNEL_PSNR_DB = 35.0
ACCEPT_CHECKS = ("lr_ok", "psnr_ok", "kernel_ok")

BENCH_COLUMNS = [
    "seed", "variant", "bicubic_psnr", "image_psnr", "kernel_psnr",
    "lr_loss_ratio", "runtime_s", "kernel_params", "image_params",
    "lr_ok", "psnr_ok", "kernel_ok", "passed",
]


def _failure(error: Union[str, Exception], message: str, **extra) -> Dict[str, Any]:
    return {"success": False, "error": str(error), "message": message, **extra}


def synthetic_scene(rng: np.random.Generator, size: int, channels: int = 1) -> np.ndarray:
    """
    Procedural HR test image: piecewise-constant rectangles and discs over a
    smooth gradient, plus a faint stripe texture. Sharp edges make the blur
    identifiable.
    """
    rows, cols = np.mgrid[0:size, 0:size] / float(size)
    image = np.zeros((size, size, channels))
    for c in range(channels):
        a, b = rng.uniform(-0.3, 0.3, size=2)
        image[:, :, c] = 0.5 + a * (rows - 0.5) + b * (cols - 0.5)

    for _ in range(int(rng.integers(6, 11))):
        color = rng.uniform(0.05, 0.95, size=channels)
        cy, cx = rng.uniform(0.1, 0.9, size=2)
        extent = rng.uniform(0.05, 0.25)
        if rng.random() < 0.5:
            mask = (np.abs(rows - cy) < extent) & (np.abs(cols - cx) < extent * rng.uniform(0.5, 1.5))
        else:
            mask = (rows - cy) ** 2 + (cols - cx) ** 2 < extent ** 2
        image[mask] = color

    angle = rng.uniform(0.0, np.pi)
    stripes = 0.04 * np.sin(2 * np.pi * 12 * (np.cos(angle) * rows + np.sin(angle) * cols))
    return np.clip(image + stripes[:, :, None], 0.0, 1.0)


def draw_kernel(rng: np.random.Generator, cfg: SolverConfig, mode: str) -> Tuple[np.ndarray, Dict[str, Any]]:
    """
    Draw the ground-truth kernel for synthesis.

    Returns:
        (kernel, description) where description holds the sampled parameters.
    """
    side = cfg.kernel_side
    if mode == "delta":
        return delta_kernel(side), {"mode": mode}
    if mode == "motion":
        return motion_kernel(rng, side, cfg.motion_steps), {"mode": mode}
    if mode in ("gaussian", "ood"):
        width_range = replace(cfg, ood_kernels=(mode == "ood")).resolved_width_range()
        params = sample_gaussian_params(rng, cfg.scale, width_range, tuple(cfg.angle_range), cfg.center_jitter)
        return gaussian_kernel(params, side), {
            "mode": mode,
            "sigma1": params.sigma1,
            "sigma2": params.sigma2,
            "theta": params.theta,
            "center": list(params.center),
        }
    raise ValueError(f"Unknown synthesis mode '{mode}', expected one of {SYNTH_MODES}")


def _crop_lr_for_restorer(
    y: np.ndarray,
    cfg: SolverConfig,
    hr: Optional[np.ndarray],
) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    """
    Center-crop y so that (dim·s) is divisible by 2^depth, cropping the
    ground-truth HR by the matching window.
    """
    depth_multiple = 2 ** cfg.restorer_depth
    multiple = depth_multiple // math.gcd(cfg.scale, depth_multiple)
    h, w = y.shape[:2]
    new_h, new_w = h - h % multiple, w - w % multiple
    if (new_h, new_w) == (h, w):
        return y, hr
    logger.info(f"  Cropping LR {h}×{w} -> {new_h}×{new_w} (HR must be a multiple of {depth_multiple})")
    top, left = (h - new_h) // 2, (w - new_w) // 2
    y = y[top:top + new_h, left:left + new_w].copy()
    if hr is not None:
        s = cfg.scale
        hr = hr[top * s:(top + new_h) * s, left * s:(left + new_w) * s].copy()
    return y, hr


class SuperResolutionPipeline:
    """
    Orchestrates the complete blind super-resolution workflow.

    Pipeline Flow:
    --------------
    SYNTHESIZE:
    HR image → Center-crop → Draw kernel → Blur + downsample + noise → LR + ground truth files

    SOLVE:
    LR image → Fit kernel and image generators (MCKA ↔ MLAO) → SR image + kernel + trace

    EVALUATE:
    SR image + HR image (+ kernels) → PSNR / SSIM / kernel PSNR

    Every output directory gets a `manifest.json` (see run_manifest), which
    lets each step find the previous step's files from its directory alone.
    """

    def __init__(self, cfg: Optional[SolverConfig] = None):
        """
        Initialize the pipeline.

        Args:
            cfg: Solver configuration; defaults to SolverConfig().

        Raises:
            ValueError: If the configuration is invalid.
        """
        self.cfg = (cfg if cfg is not None else SolverConfig()).require_valid()
        logger.info("✓ Super-resolution pipeline initialized")

    # =========================================================================
    # synth
    # =========================================================================

    def synthesize(
        self,
        hr_path: Union[str, Path],
        out_dir: Union[str, Path],
        mode: str = "gaussian",
    ) -> Dict[str, Any]:
        """
        Degrade an HR image with a random kernel and write the test case.

        Args:
            hr_path: 8-bit grayscale or RGB image, each side >= 32.
            out_dir: Output directory.
            mode: "gaussian" (in-range), "ood" (wider widths), "motion" or "delta".

        Returns:
            Dictionary containing:
                - success: Boolean indicating if synthesis completed
                - outputs: Named output paths (hr, lr, kernel_png, kernel_txt)
                - kernel: Description of the sampled kernel
                - message / error
        """
        cfg = self.cfg
        logger.info(f"Starting synthesis for: {hr_path}")
        start = time.perf_counter()

        try:
            # ===================================================================
            # STAGE 1: Read and crop HR
            # ===================================================================
            logger.info("Stage 1: Reading HR image")
            try:
                hr = read_image(hr_path)
            except ValueError as e:
                logger.error(f"✗ {e}")
                return _failure(e, "Failed to read HR image.")
            if min(hr.shape[:2]) < MIN_HR_SIDE:
                error = f"HR image {hr.shape[0]}×{hr.shape[1]} is too small; each side must be >= {MIN_HR_SIDE}"
                logger.error(f"✗ {error}")
                return _failure(error, "HR image too small.")
            hr = center_crop(hr, cfg.hr_multiple)
            logger.info(f"✓ HR {hr.shape[0]}×{hr.shape[1]}×{hr.shape[2]} (cropped to multiples of {cfg.hr_multiple})")

            # ===================================================================
            # STAGE 2: Draw kernel
            # ===================================================================
            logger.info(f"Stage 2: Drawing {mode} kernel ({cfg.kernel_side}×{cfg.kernel_side})")
            rng = np.random.default_rng([cfg.seed, _SYNTH_STREAM])
            kernel, description = draw_kernel(rng, cfg, mode)
            check_kernel(kernel)
            logger.info(f"✓ Kernel drawn: {description}")

            # ===================================================================
            # STAGE 3: Degrade
            # ===================================================================
            logger.info(f"Stage 3: Degrading (×{cfg.scale}, noise σ={cfg.noise_sigma})")
            lr = degrade(hr, kernel, DegradationConfig(cfg.scale, cfg.noise_sigma, cfg.seed), rng)
            logger.info(f"✓ LR {lr.shape[0]}×{lr.shape[1]}")

            # ===================================================================
            # STAGE 4: Write files
            # ===================================================================
            logger.info("Stage 4: Writing outputs")
            out_dir = Path(out_dir)
            outputs = {
                "hr": write_image(out_dir / "hr.png", hr),
                "lr": write_image(out_dir / "lr.png", lr),
                "kernel_png": write_kernel_image(out_dir / "kernel.png", kernel),
                "kernel_txt": write_kernel_text(out_dir / "kernel.txt", kernel),
                "config": dump_config_file(cfg, out_dir / "config.txt"),
            }
            wall = time.perf_counter() - start
            RunManifest(out_dir).record(
                "synth",
                config=cfg.to_dict(),
                inputs={"hr": hr_path},
                outputs=outputs,
                seed=cfg.seed,
                wall_clock_s=wall,
                metrics={"kernel": description},
            )
            logger.info(f"✓ Synthesis written to {out_dir}")

            return {
                "success": True,
                "outputs": {name: str(path) for name, path in outputs.items()},
                "kernel": description,
                "lr_shape": list(lr.shape),
                "message": f"Synthesized {mode} test case in {out_dir}.",
            }

        except Exception as e:
            logger.error(f"✗ Unexpected error in synthesis: {str(e)}")
            logger.exception("Full traceback:")
            return _failure(e, "Unexpected error during synthesis.")

    # =========================================================================
    # solve
    # =========================================================================

    def _resolve_solve_inputs(
        self,
        lr_path: Union[str, Path],
        gt_hr: Optional[Union[str, Path]],
        gt_kernel: Optional[Union[str, Path]],
    ) -> Tuple[Path, Optional[Path], Optional[Path]]:
        if is_run_dir(lr_path):
            manifest = RunManifest(lr_path)
            lr = manifest.output_path("lr", "synth")
            if lr is None:
                raise ValueError(f"No synthesized LR image recorded in {lr_path}")
            gt_hr = gt_hr or manifest.output_path("hr", "synth")
            gt_kernel = gt_kernel or manifest.output_path("kernel_txt", "synth")
            return lr, Path(gt_hr) if gt_hr else None, Path(gt_kernel) if gt_kernel else None
        return Path(lr_path), Path(gt_hr) if gt_hr else None, Path(gt_kernel) if gt_kernel else None

    def solve(
        self,
        lr_path: Union[str, Path],
        out_dir: Union[str, Path],
        gt_hr: Optional[Union[str, Path]] = None,
        gt_kernel: Optional[Union[str, Path]] = None,
        init_from: Optional[Union[str, Path]] = None,
    ) -> Dict[str, Any]:
        """
        Run the blind solver on one LR image and write its results.

        Args:
            lr_path: LR image, or a `synth` output directory (ground truth is
                then picked up from its manifest).
            out_dir: Output directory.
            gt_hr: Optional ground-truth HR image.
            gt_kernel: Optional ground-truth kernel text matrix.
            init_from: Optional directory of saved networks to start from.

        Returns:
            Dictionary containing:
                - success: Boolean indicating if the solve completed
                - outputs: Named output paths (sr, kernel_png, kernel_txt, trace, ...)
                - metrics: Final metrics (LR loss, and PSNRs when ground truth is given)
                - aborted: True when the solver hit a non-finite value
                - message / error
        """
        cfg = self.cfg
        out_dir = Path(out_dir)
        logger.info(f"Starting solve for: {lr_path}")

        try:
            # ===================================================================
            # STAGE 1: Read inputs
            # ===================================================================
            logger.info("Stage 1: Reading inputs")
            try:
                lr_file, hr_file, kernel_file = self._resolve_solve_inputs(lr_path, gt_hr, gt_kernel)
                y = read_image(lr_file)
                hr = read_image(hr_file) if hr_file else None
                k_gt = read_kernel_text(kernel_file) if kernel_file else None
            except ValueError as e:
                logger.error(f"✗ {e}")
                return _failure(e, "Failed to read solver inputs.")

            y, hr = _crop_lr_for_restorer(y, cfg, hr)
            gt = None
            if hr is not None and k_gt is not None:
                expected = (y.shape[0] * cfg.scale, y.shape[1] * cfg.scale, y.shape[2])
                if hr.shape != expected:
                    error = f"Ground-truth HR shape {list(hr.shape)} does not match LR×{cfg.scale} {list(expected)}"
                    logger.error(f"✗ {error}")
                    return _failure(error, "Ground truth does not match the LR image.")
                if k_gt.shape[0] != cfg.kernel_side:
                    error = f"Ground-truth kernel side {k_gt.shape[0]} does not match {cfg.kernel_side} for ×{cfg.scale}"
                    logger.error(f"✗ {error}")
                    return _failure(error, "Ground truth does not match the scale factor.")
                gt = (hr, k_gt)
            logger.info(f"✓ LR {y.shape[0]}×{y.shape[1]}×{y.shape[2]}{' with ground truth' if gt else ''}")

            # ===================================================================
            # STAGE 2: Solve
            # ===================================================================
            logger.info("Stage 2: Fitting kernel and image generators")
            try:
                solver = MLMCSolver(y, cfg)
            except ValueError as e:
                logger.error(f"✗ {e}")
                return _failure(e, "Invalid solver input.")
            if init_from is not None:
                solver.load_networks(init_from)
                logger.info(f"  Networks initialized from {init_from}")

            try:
                result = solver.run(gt)
            except SolverAbort as e:
                trace_path = write_trace_csv(solver.trace, out_dir / "trace.csv")
                logger.error(f"✗ Solver aborted: {e} (partial trace in {trace_path})")
                return _failure(
                    e,
                    "Solver aborted on a non-finite value.",
                    aborted=True,
                    diagnostics=e.diagnostics,
                    outputs={"trace": str(trace_path)},
                )

            # ===================================================================
            # STAGE 3: Write outputs
            # ===================================================================
            logger.info("Stage 3: Writing outputs")
            network_files = solver.save_networks(out_dir / "networks")
            outputs = {
                "sr": write_image(out_dir / "sr.png", result.image),
                "kernel_png": write_kernel_image(out_dir / "kernel_est.png", result.kernel),
                "kernel_txt": write_kernel_text(out_dir / "kernel_est.txt", result.kernel),
                "trace": write_trace_csv(result.trace, out_dir / "trace.csv"),
                "config": dump_config_file(cfg, out_dir / "config.txt"),
            }
            outputs.update({f"networks/{path.name}": path for path in network_files})

            metrics: Dict[str, Any] = {
                "initial_lr_loss": result.initial_lr_loss,
                "final_lr_loss": result.final_lr_loss,
                "kernel_params": count_parameters(solver.state.kernel_net.params),
                "image_params": count_parameters(solver.state.image_net.params),
            }
            if gt is not None:
                metrics.update(self._score(result.image, result.kernel, hr, k_gt))
                metrics["bicubic_psnr"] = psnr(bicubic_upsample(y, cfg.scale), hr)

            inputs = {"lr": lr_file}
            if hr_file:
                inputs["gt_hr"] = hr_file
            if kernel_file:
                inputs["gt_kernel"] = kernel_file
            RunManifest(out_dir).record(
                "solve",
                config=cfg.to_dict(),
                inputs=inputs,
                outputs=outputs,
                seed=cfg.seed,
                wall_clock_s=result.wall_s,
                metrics=metrics,
            )

            logger.info("=" * 70)
            logger.info("✓ SOLVE COMPLETE")
            logger.info(f"  Output: {out_dir}")
            logger.info(f"  LR loss: {result.initial_lr_loss:.6g} -> {result.final_lr_loss:.6g}")
            if gt is not None:
                logger.info(f"  PSNR: {metrics['image_psnr']:.2f} dB (bicubic {metrics['bicubic_psnr']:.2f} dB)")
                logger.info(f"  Kernel PSNR: {metrics['kernel_psnr']:.2f} dB")
            logger.info("=" * 70)

            return {
                "success": True,
                "outputs": {name: str(path) for name, path in outputs.items()},
                "metrics": metrics,
                "wall_clock_s": result.wall_s,
                "message": f"Solved {lr_file} in {result.wall_s:.1f}s.",
            }

        except Exception as e:
            logger.error(f"✗ Unexpected error in solve: {str(e)}")
            logger.exception("Full traceback:")
            return _failure(e, "Unexpected error during solve.")

    def solve_many(
        self,
        lr_paths: Sequence[Union[str, Path]],
        out_dir: Union[str, Path],
        jobs: int = 1,
    ) -> List[Dict[str, Any]]:
        """
        Solve several LR images, each into `out_dir/<image stem>`.

        Solvers share nothing; with jobs > 1 they run in worker processes.
        """
        out_dir = Path(out_dir)
        tasks = []
        for index, path in enumerate(lr_paths):
            path = Path(path)
            name = path.name if path.is_dir() else path.stem
            target = out_dir / name if len(lr_paths) > 1 else out_dir
            if any(target == other for _, _, other in tasks):
                target = out_dir / f"{name}_{index}"
            tasks.append((self.cfg, str(path), target))

        if jobs <= 1 or len(tasks) == 1:
            return [_solve_task(task) for task in tasks]
        logger.info(f"Solving {len(tasks)} images with {jobs} worker processes")
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_solve_task, tasks))

    # =========================================================================
    # eval
    # =========================================================================

    def _score(
        self,
        sr: np.ndarray,
        k_est: Optional[np.ndarray],
        hr: np.ndarray,
        k_gt: Optional[np.ndarray],
        luma: bool = False,
    ) -> Dict[str, float]:
        metrics = {"image_psnr": psnr(sr, hr), "image_ssim": ssim(sr, hr)}
        if luma:
            metrics["luma_psnr"] = luma_psnr(sr, hr)
        if k_est is not None and k_gt is not None:
            metrics["kernel_psnr"] = kernel_psnr(k_est, k_gt, peak=self.cfg.kernel_psnr_peak)
        return metrics

    def evaluate(
        self,
        sr_path: Union[str, Path],
        hr_path: Union[str, Path],
        kest_path: Optional[Union[str, Path]] = None,
        kgt_path: Optional[Union[str, Path]] = None,
        luma: bool = False,
        out_csv: Optional[Union[str, Path]] = None,
    ) -> Dict[str, Any]:
        """
        Score an SR image (and optionally an estimated kernel) against ground truth.

        `sr_path` may be a `solve` output directory and `hr_path` a `synth`
        output directory; kernels are then taken from their manifests.

        Returns:
            Dictionary containing success, metrics (image_psnr, image_ssim
            [, luma_psnr][, kernel_psnr]), csv path, message / error.
        """
        logger.info(f"Evaluating {sr_path} against {hr_path}")
        try:
            if is_run_dir(sr_path):
                manifest = RunManifest(sr_path)
                kest_path = kest_path or manifest.output_path("kernel_txt", "solve")
                sr_path = manifest.output_path("sr", "solve")
                if sr_path is None:
                    raise ValueError("No solve output recorded in the given directory")
            if is_run_dir(hr_path):
                manifest = RunManifest(hr_path)
                kgt_path = kgt_path or manifest.output_path("kernel_txt", "synth")
                hr_path = manifest.output_path("hr", "synth")
                if hr_path is None:
                    raise ValueError("No synthesized HR image recorded in the given directory")

            sr, hr = read_image(sr_path), read_image(hr_path)
            k_est = read_kernel_text(kest_path) if kest_path else None
            k_gt = read_kernel_text(kgt_path) if kgt_path else None
            metrics = self._score(sr, k_est, hr, k_gt, luma)
        except ValueError as e:
            logger.error(f"✗ {e}")
            return _failure(e, "Evaluation failed.")

        out_csv = Path(out_csv) if out_csv else Path(sr_path).parent / "eval.csv"
        out_csv.parent.mkdir(parents=True, exist_ok=True)
        header = list(metrics.keys())
        out_csv.write_text(",".join(header) + "\n" + ",".join(repr(metrics[h]) for h in header) + "\n")

        logger.info("✓ " + ", ".join(f"{name}={value:.4f}" for name, value in metrics.items()))
        return {
            "success": True,
            "metrics": metrics,
            "csv": str(out_csv),
            "message": f"Metrics written to {out_csv}.",
        }

    # =========================================================================
    # gradcheck
    # =========================================================================

    def gradcheck(self, seed: int, trials: int = 20) -> Dict[str, Any]:
        """
        Finite-difference check of every registered op.

        Returns:
            Dictionary with success (all ops below tolerance), rows of
            (op, max relative error, passed) and the tolerance.
        """
        logger.info(f"Gradient check: {trials} trials per op, seed {seed}")
        start = time.perf_counter()
        rows = run_gradcheck(seed, trials)
        failed = [name for name, _, passed in rows if not passed]
        wall = time.perf_counter() - start
        if failed:
            logger.error(f"✗ Gradient check failed for: {', '.join(failed)}")
        else:
            logger.info(f"✓ All {len(rows)} ops pass ({wall:.1f}s)")
        return {
            "success": not failed,
            "rows": rows,
            "tolerance": GRADCHECK_TOLERANCE,
            "failed": failed,
            "error": f"ops above tolerance: {', '.join(failed)}" if failed else None,
            "message": f"{len(rows) - len(failed)}/{len(rows)} ops pass.",
        }

    # =========================================================================
    # bench
    # =========================================================================

    def bench(
        self,
        seeds: Sequence[int],
        out_dir: Union[str, Path],
        variants: Sequence[str] = DEFAULT_BENCH_VARIANTS,
        hr_size: int = 128,
        jobs: int = 1,
    ) -> Dict[str, Any]:
        """
        Run the seeded synthetic scenario under several solver variants.

        For each seed a procedural HR scene of hr_size² is degraded with an
        in-range Gaussian kernel; every variant solves the same LR image.
        The noisy variants add 3.92% noise and toggle the hyper-Laplacian prior.

        Returns:
            Dictionary with success, rows (one per seed × variant, BENCH_COLUMNS)
            and the CSV path.
        """
        unknown = [v for v in variants if v not in BENCH_VARIANTS]
        if unknown:
            return _failure(f"unknown bench variants {unknown}; choose from {BENCH_VARIANTS}", "Invalid bench variants.")
        if hr_size % self.cfg.hr_multiple:
            return _failure(
                f"bench HR size {hr_size} is not a multiple of {self.cfg.hr_multiple}",
                "Invalid bench scene size.",
            )

        out_dir = Path(out_dir)
        tasks = [(self.cfg, seed, variant, hr_size) for seed in seeds for variant in variants]
        logger.info(f"Bench: {len(seeds)} seeds × {len(variants)} variants at {hr_size}×{hr_size}")
        if jobs <= 1:
            rows = [_bench_task(task) for task in tasks]
        else:
            with ProcessPoolExecutor(max_workers=jobs) as pool:
                rows = list(pool.map(_bench_task, tasks))

        failed = [row for row in rows if row.get("error")]
        rows = [row for row in rows if not row.get("error")]
        acceptance = _summarize_acceptance(rows)
        csv_path = out_dir / "bench.csv"
        csv_path.parent.mkdir(parents=True, exist_ok=True)
        lines = [",".join(BENCH_COLUMNS)]
        lines += [",".join(repr(row[c]) if isinstance(row[c], float) else str(row[c]) for c in BENCH_COLUMNS)
                  for row in rows]
        csv_path.write_text("\n".join(lines) + "\n")
        RunManifest(out_dir).record(
            "bench",
            config=self.cfg.to_dict(),
            outputs={"bench": csv_path},
            seed=self.cfg.seed,
            metrics={"variants": list(variants), "seeds": list(seeds), "failed": len(failed), "acceptance": acceptance},
        )

        if failed:
            logger.error(f"✗ {len(failed)} bench runs failed")
        return {
            "success": not failed,
            "rows": rows,
            "failed": failed,
            "csv": str(csv_path),
            "error": f"{len(failed)} bench runs failed" if failed else None,
            "aborted": bool(failed),
            "acceptance": acceptance,
            "message": f"Bench results written to {csv_path}.",
        }


def bench_case(cfg: SolverConfig, seed: int, variant: str, hr_size: int) -> Dict[str, Any]:
    """
    One bench run: build the scene for `seed`, degrade it, solve with `variant`.

    The scene, kernel and noise depend only on `seed` (and the noise level),
    so all variants of a seed see the same observation.
    """
    noisy = variant.startswith("noise")
    rng = np.random.default_rng([seed, _SCENE_STREAM])
    hr = synthetic_scene(rng, hr_size)
    params = sample_gaussian_params(rng, cfg.scale, cfg.resolved_width_range(), tuple(cfg.angle_range), cfg.center_jitter)
    k_gt = gaussian_kernel(params, cfg.kernel_side)
    noise = BENCH_NOISE_SIGMA if noisy else 0.0
    y = degrade(hr, k_gt, DegradationConfig(cfg.scale, noise, seed), rng)

    run_cfg = replace(
        cfg,
        seed=seed,
        noise_sigma=noise,
        no_mc=variant == "no-mc",
        no_meta=variant == "no-meta",
        no_kernel=variant == "no-kernel",
        rho_reg=0.0 if variant == "noise-no-hl" else cfg.rho_reg,
    )
    solver = MLMCSolver(y, run_cfg)
    result = solver.run((hr, k_gt))
    row = {
        "seed": seed,
        "variant": variant,
        "bicubic_psnr": psnr(bicubic_upsample(y, cfg.scale), hr),
        "image_psnr": psnr(result.image, hr),
        "kernel_psnr": kernel_psnr(result.kernel, k_gt, peak=cfg.kernel_psnr_peak),
        "lr_loss_ratio": result.final_lr_loss / max(result.initial_lr_loss, 1e-300),
        "runtime_s": result.wall_s,
        "kernel_params": count_parameters(solver.state.kernel_net.params),
        "image_params": count_parameters(solver.state.image_net.params),
    }
    row.update(acceptance_checks(row))
    return row


def acceptance_checks(row: Dict[str, Any]) -> Dict[str, bool]:
    """
    Desk-scale acceptance of one bench row.

        lr_ok      final LR loss <= 0.1 × its value before the first iteration
        psnr_ok    image PSNR >= bicubic PSNR + 0.5 dB
        kernel_ok  kernel PSNR >= 35 dB
    """
    checks = {
        "lr_ok": bool(row["lr_loss_ratio"] <= ACCEPT_LR_LOSS_RATIO),
        "psnr_ok": bool(row["image_psnr"] >= row["bicubic_psnr"] + ACCEPT_BICUBIC_MARGIN_DB),
        "kernel_ok": bool(row["kernel_psnr"] >= ACCEPT_KERNEL_PSNR_DB),
    }
    checks["passed"] = all(checks.values())
    return checks


def _summarize_acceptance(rows: List[Dict[str, Any]]) -> Dict[str, Dict[str, int]]:
    """Per variant: how many seeds pass each acceptance check, logged with ✓/✗."""
    summary: Dict[str, Dict[str, int]] = {}
    for row in rows:
        counts = summary.setdefault(row["variant"], {"seeds": 0, "passed": 0, **{c: 0 for c in ACCEPT_CHECKS}})
        counts["seeds"] += 1
        for check in ACCEPT_CHECKS + ("passed",):
            counts[check] += int(row[check])
        mark = "✓" if row["passed"] else "✗"
        failing = [c for c in ACCEPT_CHECKS if not row[c]]
        logger.info(
            f"{mark} seed={row['seed']} {row['variant']}: LR ratio {row['lr_loss_ratio']:.4f}, "
            f"PSNR {row['image_psnr']:.2f} (bicubic {row['bicubic_psnr']:.2f}), kPSNR {row['kernel_psnr']:.2f}"
            + (f" - failing {failing}" if failing else "")
        )
    return summary


def _bench_task(task: Tuple[SolverConfig, int, str, int]) -> Dict[str, Any]:
    cfg, seed, variant, hr_size = task
    try:
        return bench_case(cfg, seed, variant, hr_size)
    except (SolverAbort, ValueError) as e:
        logger.error(f"✗ Bench run seed={seed} variant={variant} failed: {e}")
        return {"seed": seed, "variant": variant, "error": str(e)}


def _solve_task(task: Tuple[SolverConfig, str, Path]) -> Dict[str, Any]:
    cfg, lr_path, out_dir = task
    result = SuperResolutionPipeline(cfg).solve(lr_path, out_dir)
    result["input"] = lr_path
    return result


def default_out_dir(command: str) -> Path:
    """`MLMC_OUTPUT_DIR/<command>-<timestamp>`."""
    return Path(OUTPUT_DIR) / f"{command}-{time.strftime('%Y%m%d-%H%M%S')}"
