"""
Solver Module

Blind super-resolution by alternating two phases per outer iteration:

    MCKA  Monte Carlo kernel approximation: draw T random kernels, weight each
          by how well it explains y together with the current HR estimate,
          and pull the kernel generator toward the weighted batch.
    MLAO  Meta-learned alternating optimization: for each of Q meta-updates,
          fix k = G_k, take P Adam steps on the image generator against the
          noise-aware reconstruction loss, then update the kernel generator
          once with the weighted average of those P losses.

A single kernel-generator parameter set flows through both phases. It is
driven by two Adam states (one per phase) so the step count of each phase
can be observed independently.
"""

import csv
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple, Union

import numpy as np

from src.config import SolverConfig
from src.degradation import (
    as_image,
    bicubic_upsample,
    kernel_psnr,
    psnr,
    reconstruction_residual,
)
from src.kernel_sampler import sample_kernel_batch
from src.models import (
    ImageRestorer,
    KernelGenerator,
    estimate_noise_variance,
    hyper_laplacian_loss,
    tensor_to_image,
)
from src.tensor_ad import AdamState, NonFiniteGradientError, Tensor, adam_step, backward, forward_op

logger = logging.getLogger(__name__)

# Smallest LR side accepted by the solver
MIN_LR_SIDE = 16

# Rescalings tried before an oversized kernel step is dropped
MAX_STEP_SHRINKS = 8

TRACE_COLUMNS = ["i", "phase", "loss_mc", "loss_re", "loss_ml", "sigma2", "kernel_psnr", "image_psnr", "wall_ms"]


class SolverAbort(RuntimeError):
    """
    A phase produced a non-finite loss or gradient.

    Attributes:
        diagnostics: Where it happened: phase, i, and (l, tau) or (q, p), plus the loss value.
    """

    def __init__(self, message: str, diagnostics: Dict[str, object]):
        super().__init__(message)
        self.diagnostics = diagnostics


@dataclass
class TraceRecord:
    """One row of the convergence trace; one per (outer iteration, phase)."""

    i: int
    phase: str
    loss_mc: Optional[float] = None
    loss_re: Optional[float] = None
    loss_ml: Optional[float] = None
    sigma2: Optional[float] = None
    kernel_psnr: Optional[float] = None
    image_psnr: Optional[float] = None
    wall_ms: float = 0.0


@dataclass
class MLAOReport:
    """Per-q, per-p losses of one MLAO phase."""

    re_losses: List[List[float]] = field(default_factory=list)
    meta_losses: List[float] = field(default_factory=list)
    sigma2: List[List[float]] = field(default_factory=list)


@dataclass
class SolverState:
    """
    Everything that evolves during a run.

    The three Adam states advance independently: per outer iteration the
    kernel-MC state by L steps, the kernel-ML state by Q, the image state by Q·P.
    """

    kernel_net: KernelGenerator
    image_net: ImageRestorer
    rng_mc: np.random.Generator
    adam_x: AdamState = field(default_factory=AdamState)
    adam_k_mc: AdamState = field(default_factory=AdamState)
    adam_k_ml: AdamState = field(default_factory=AdamState)
    i: int = 0


@dataclass
class SolverResult:
    image: np.ndarray
    kernel: np.ndarray
    trace: List[TraceRecord]
    initial_lr_loss: float
    final_lr_loss: float
    wall_s: float


# =============================================================================
# Trace files
# =============================================================================

def _format_cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_trace_csv(records: List[TraceRecord], path: Union[str, Path]) -> Path:
    """Write trace rows with columns TRACE_COLUMNS; missing values are empty cells."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(TRACE_COLUMNS)
        for record in records:
            row = asdict(record)
            writer.writerow([_format_cell(row[column]) for column in TRACE_COLUMNS])
    return path


def read_trace_csv(path: Union[str, Path]) -> List[TraceRecord]:
    """Parse a file written by `write_trace_csv` back into records."""
    records = []
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != TRACE_COLUMNS:
            raise ValueError(f"Trace file {path} has columns {reader.fieldnames}, expected {TRACE_COLUMNS}")
        for row in reader:
            values = {}
            for column in fields(TraceRecord):
                cell = row[column.name]
                if column.name == "i":
                    values["i"] = int(cell)
                elif column.name == "phase":
                    values["phase"] = cell
                else:
                    values[column.name] = float(cell) if cell != "" else None
            records.append(TraceRecord(**values))
    return records


# =============================================================================
# Monte Carlo weights
# =============================================================================

def lr_loss(y: np.ndarray, x: np.ndarray, k: np.ndarray, s: int) -> float:
    """‖y − (x ⊗ k)↓s‖²_F."""
    return float(np.sum(reconstruction_residual(y, x, k, s) ** 2))


def mc_fitness(
    y: np.ndarray,
    x: np.ndarray,
    batch: List[np.ndarray],
    k_est: np.ndarray,
    s: int,
    epsilon: float,
) -> np.ndarray:
    """ν_τ = ‖y − (x ⊗ k_τ)↓s‖²_F + ‖k_est − k_τ‖²_F + ε for every sampled kernel."""
    return np.array([
        lr_loss(y, x, k_g, s) + float(np.sum((k_est - k_g) ** 2)) + epsilon
        for k_g in batch
    ])


def compute_mc_weights(
    y: np.ndarray,
    x: np.ndarray,
    batch: List[np.ndarray],
    k_est: np.ndarray,
    s: int,
    epsilon: float,
    normalize: bool = False,
) -> np.ndarray:
    """
    Importance weights ω_τ = 1/ν_τ of a Monte Carlo kernel batch.

    Args:
        y: LR observation.
        x: Current HR estimate.
        batch: Sampled kernels (nonempty).
        k_est: Current generator kernel.
        s: Scale factor.
        epsilon: Stabilizer > 0.
        normalize: Rescale the weights to sum to 1 (raw 1/ν otherwise).

    Returns:
        np.ndarray: One positive weight per kernel, strictly decreasing in ν.
    """
    if not batch:
        raise ValueError("compute_mc_weights needs a nonempty kernel batch")
    if not epsilon > 0:
        raise ValueError(f"epsilon must be > 0, got {epsilon}")
    weights = 1.0 / mc_fitness(y, x, batch, k_est, s, epsilon)
    if normalize:
        weights = weights / weights.sum()
    return weights


def _logit_shift(after: np.ndarray, before: np.ndarray) -> float:
    delta = after - before
    return float(np.max(np.abs(delta - delta.mean())))


def _is_finite(value: float) -> bool:
    return bool(np.isfinite(value))


def _format_loss(value: Optional[float]) -> str:
    return "-" if value is None else f"{value:.6g}"


# =============================================================================
# Solver
# =============================================================================

class MLMCSolver:
    """
    Fits a kernel generator and an image restorer to one LR image.

    Args:
        y: LR observation (h, w, C) in [0, 1], h and w >= 16.
        cfg: Validated solver configuration.

    Raises:
        ValueError: Invalid config, LR too small, or HR size not divisible by 2^depth.
    """

    def __init__(self, y: np.ndarray, cfg: SolverConfig):
        cfg.require_valid()
        self.cfg = cfg
        self.y = as_image(y)
        h, w, channels = self.y.shape
        if min(h, w) < MIN_LR_SIDE:
            raise ValueError(f"LR image {h}×{w} is too small; each side must be >= {MIN_LR_SIDE}")

        s = cfg.scale
        self.hr_shape = (h * s, w * s)
        self.ranges = cfg.kernel_ranges()
        self.meta_weights = cfg.resolved_meta_weights()

        # Independent streams per role so no component's draws shift another's
        kernel_seed, image_seed, mc_seed = np.random.SeedSequence(cfg.seed).spawn(3)
        kernel_net = KernelGenerator(
            cfg.kernel_side,
            np.random.default_rng(kernel_seed),
            z_dim=cfg.z_k_dim,
            hidden=cfg.kernel_hidden,
            slope=cfg.leaky_slope,
        )
        image_net = ImageRestorer(
            self.hr_shape,
            channels,
            np.random.default_rng(image_seed),
            depth=cfg.restorer_depth,
            channels=cfg.restorer_channels,
            skip_channels=cfg.skip_channels,
            z_channels=cfg.z_x_channels,
            slope=cfg.leaky_slope,
        )
        self.state = SolverState(kernel_net, image_net, np.random.default_rng(mc_seed))
        self.trace: List[TraceRecord] = []

    # -------------------------------------------------------------------------
    # helpers
    # -------------------------------------------------------------------------

    def current_image(self) -> np.ndarray:
        return self.state.image_net.image()

    def current_kernel(self) -> np.ndarray:
        return self.state.kernel_net.kernel()

    def _abort(self, message: str, **diagnostics) -> SolverAbort:
        diagnostics = {"i": self.state.i, **diagnostics}
        logger.error(f"✗ {message} {diagnostics}")
        return SolverAbort(message, diagnostics)

    def _kernel_step(self, grads: Dict[Tensor, np.ndarray], adam: AdamState, lr: float, **where) -> None:
        """
        One Adam step on the kernel generator, shrunk if it moves any logit too far.

        The update is scaled back along its own direction until no logit changes
        by more than cfg.kernel_step_cap relative to the mean change (a common
        shift leaves the kernel unchanged). A step still over the cap after
        MAX_STEP_SHRINKS rescalings is dropped. Adam state is kept as computed.
        """
        net = self.state.kernel_net
        before = {name: p.data.copy() for name, p in net.params.items()}
        logits_before = net.logits()
        try:
            adam_step(net.params, grads, adam, lr)
        except NonFiniteGradientError as e:
            raise self._abort(f"Non-finite kernel gradient in '{e.parameter_name}'", **where) from e

        cap = self.cfg.kernel_step_cap
        step = {name: p.data - before[name] for name, p in net.params.items()}
        shift = _logit_shift(net.logits(), logits_before)
        scale = 1.0
        for _ in range(MAX_STEP_SHRINKS):
            if shift <= cap:
                break
            scale *= cap / shift
            self._set_kernel_params(before, step, scale)
            shift = _logit_shift(net.logits(), logits_before)
        if shift > cap:
            scale = 0.0
            self._set_kernel_params(before, step, scale)
        if scale < 1.0:
            logger.debug(f"  kernel step scaled by {scale:.3g} {where}")

    def _set_kernel_params(
        self, before: Dict[str, np.ndarray], step: Dict[str, np.ndarray], scale: float
    ) -> None:
        for name, p in self.state.kernel_net.params.items():
            p.data = before[name] + scale * step[name]

    def _image_step(self, grads: Dict[Tensor, np.ndarray], **where) -> None:
        try:
            adam_step(self.state.image_net.params, grads, self.state.adam_x, self.cfg.gamma_x)
        except NonFiniteGradientError as e:
            raise self._abort(f"Non-finite image gradient in '{e.parameter_name}'", **where) from e

    def _metrics(self, record: TraceRecord, gt: Optional[Tuple[np.ndarray, np.ndarray]]) -> None:
        if gt is None:
            return
        gt_image, gt_kernel = gt
        record.image_psnr = psnr(self.current_image(), gt_image)
        record.kernel_psnr = kernel_psnr(self.current_kernel(), gt_kernel, peak=self.cfg.kernel_psnr_peak)

    # -------------------------------------------------------------------------
    # phases
    # -------------------------------------------------------------------------

    def mcka_phase(self, x_current: np.ndarray) -> Optional[float]:
        """
        Pull the kernel generator toward a fitness-weighted random kernel batch.

        The batch is drawn once and reused for all L steps. Returns the last
        L_MC value, or None when the phase is disabled (no_mc / no_kernel).
        """
        cfg, state = self.cfg, self.state
        if cfg.no_mc or cfg.no_kernel:
            return None

        batch = sample_kernel_batch(state.rng_mc, cfg.mc_samples, cfg.scale, self.ranges, cfg.kernel_side)
        loss_value = None
        for l in range(cfg.mc_steps):
            k = state.kernel_net.forward()
            nu = mc_fitness(self.y, x_current, batch, k.numpy(), cfg.scale, cfg.epsilon)
            bad = np.flatnonzero(~np.isfinite(nu))
            if bad.size:
                raise self._abort("Non-finite Monte Carlo fitness", phase="MCKA", l=l, tau=int(bad[0]))
            weights = 1.0 / nu
            if cfg.normalize_weights:
                weights = weights / weights.sum()

            loss = None
            for k_g, weight in zip(batch, weights):
                term = forward_op("sq_frobenius", [k - Tensor(k_g)]) * float(weight)
                loss = term if loss is None else loss + term
            loss_value = float(loss.data[0])
            if not _is_finite(loss_value):
                raise self._abort("Non-finite MCKA loss", phase="MCKA", l=l, loss=loss_value)

            self._kernel_step(backward(loss), state.adam_k_mc, cfg.gamma_mc, phase="MCKA", l=l)
            logger.debug(f"  MCKA i={state.i} l={l}: L_MC={loss_value:.6g}")
        return loss_value

    def mlao_phase(self) -> MLAOReport:
        """
        Q meta-updates; each fixes k^q = G_k, runs P image steps, then takes one
        kernel step on the weighted mean of the P reconstruction losses.

        The meta-gradient Σ_p (ω^p/P)·∂L_p/∂k^q is accumulated on a detached
        copy of k^q and pushed through the kernel generator once per q. With
        full_unroll the kernel graph is rebuilt inside every p instead (same
        gradient, more work). With no_meta the kernel steps greedily after
        every p on that p's loss alone.
        """
        cfg, state = self.cfg, self.state
        P = cfg.image_steps
        kernel_trainable = not cfg.no_kernel
        report = MLAOReport()

        for q in range(cfg.meta_steps):
            k_graph = state.kernel_net.forward()
            k_leaf = Tensor(k_graph.data.copy(), requires_grad=kernel_trainable, name="k")
            meta_grad = np.zeros(k_graph.shape)
            unrolled: Dict[Tensor, np.ndarray] = {}
            losses, sigmas = [], []

            for p in range(P):
                if cfg.full_unroll and kernel_trainable and not cfg.no_meta:
                    k_used = state.kernel_net.forward()
                else:
                    k_used = k_leaf

                x_t = state.image_net.forward()
                sigma2 = estimate_noise_variance(self.y, tensor_to_image(x_t), k_used.data, cfg.scale)
                loss = hyper_laplacian_loss(x_t, self.y, k_used, cfg.scale, sigma2, cfg.rho_reg, cfg.eta)
                loss_value = float(loss.data[0])
                if not _is_finite(loss_value):
                    raise self._abort("Non-finite reconstruction loss", phase="MLAO", q=q, p=p, loss=loss_value)

                grads = backward(loss)
                self._image_step(grads, phase="MLAO", q=q, p=p)
                losses.append(loss_value)
                sigmas.append(sigma2)

                if not kernel_trainable:
                    continue
                if cfg.no_meta:
                    upstream = grads.get(k_leaf, np.zeros(k_leaf.shape))
                    self._kernel_step(backward(k_graph, grad=upstream), state.adam_k_ml, cfg.gamma_ml,
                                      phase="MLAO", q=q, p=p)
                    k_graph = state.kernel_net.forward()
                    k_leaf = Tensor(k_graph.data.copy(), requires_grad=True, name="k")
                elif cfg.full_unroll:
                    scale = self.meta_weights[p] / P
                    for param in state.kernel_net.params.values():
                        g = grads.get(param)
                        if g is not None:
                            unrolled[param] = unrolled.get(param, 0.0) + scale * g
                else:
                    meta_grad += (self.meta_weights[p] / P) * grads.get(k_leaf, np.zeros(k_leaf.shape))

            meta_loss = float(sum(w * loss for w, loss in zip(self.meta_weights, losses)) / P)
            if kernel_trainable and not cfg.no_meta:
                kernel_grads = unrolled if cfg.full_unroll else backward(k_graph, grad=meta_grad)
                self._kernel_step(kernel_grads, state.adam_k_ml, cfg.gamma_ml, phase="MLAO", q=q)

            report.re_losses.append(losses)
            report.meta_losses.append(meta_loss)
            report.sigma2.append(sigmas)
            logger.debug(f"  MLAO i={state.i} q={q}: L_ML={meta_loss:.6g} (last L_RE={losses[-1]:.6g})")
        return report

    # -------------------------------------------------------------------------
    # outer loop
    # -------------------------------------------------------------------------

    def step(self, gt: Optional[Tuple[np.ndarray, np.ndarray]] = None) -> Tuple[TraceRecord, TraceRecord]:
        """Run one outer iteration (MCKA then MLAO) and append its two trace rows."""
        state, cfg = self.state, self.cfg

        start = time.perf_counter()
        if cfg.bicubic_warm_start and state.i == 0:
            x_current = bicubic_upsample(self.y, cfg.scale)
        else:
            x_current = self.current_image()
        mc_record = TraceRecord(i=state.i, phase="MCKA", loss_mc=self.mcka_phase(x_current))
        mc_record.wall_ms = (time.perf_counter() - start) * 1000.0
        self._metrics(mc_record, gt)
        self.trace.append(mc_record)

        start = time.perf_counter()
        report = self.mlao_phase()
        ml_record = TraceRecord(
            i=state.i,
            phase="MLAO",
            loss_re=report.re_losses[-1][-1],
            loss_ml=report.meta_losses[-1],
            sigma2=report.sigma2[-1][-1],
        )
        ml_record.wall_ms = (time.perf_counter() - start) * 1000.0
        self._metrics(ml_record, gt)
        self.trace.append(ml_record)

        state.i += 1
        return mc_record, ml_record

    def run(
        self,
        gt: Optional[Tuple[np.ndarray, np.ndarray]] = None,
        on_iteration: Optional[Callable[[int, List[TraceRecord]], None]] = None,
    ) -> SolverResult:
        """
        Run all outer iterations.

        Args:
            gt: Optional (HR image, kernel) ground truth for per-phase PSNR tracing.
            on_iteration: Called after each outer iteration with (i, trace so far).

        Returns:
            SolverResult with the final image, kernel, trace and LR losses.

        Raises:
            SolverAbort: A phase hit a non-finite loss or gradient; `self.trace`
                keeps the rows recorded so far.
        """
        cfg = self.cfg
        start = time.perf_counter()
        initial = lr_loss(self.y, self.current_image(), self.current_kernel(), cfg.scale)
        logger.info(f"Solving {self.y.shape[0]}×{self.y.shape[1]} LR at ×{cfg.scale} for {cfg.iters} iterations")
        logger.info(f"  Initial LR loss: {initial:.6g}")

        for i in range(cfg.iters):
            mc_record, ml_record = self.step(gt)
            message = (
                f"Iteration {i + 1}/{cfg.iters}: L_MC={_format_loss(mc_record.loss_mc)} "
                f"L_ML={ml_record.loss_ml:.6g} σ²={ml_record.sigma2:.3g}"
            )
            if ml_record.kernel_psnr is not None:
                message += f" kPSNR={ml_record.kernel_psnr:.2f} PSNR={ml_record.image_psnr:.2f}"
            if (i + 1) % cfg.log_every == 0 or i + 1 == cfg.iters:
                logger.info(message)
            else:
                logger.debug(message)
            if on_iteration is not None:
                on_iteration(i, self.trace)

        image, kernel = self.current_image(), self.current_kernel()
        final = lr_loss(self.y, image, kernel, cfg.scale)
        wall_s = time.perf_counter() - start
        logger.info(f"✓ Solve finished in {wall_s:.1f}s (LR loss {initial:.6g} -> {final:.6g})")
        return SolverResult(image, kernel, list(self.trace), initial, final, wall_s)

    def save_networks(self, out_dir: Union[str, Path]) -> List[Path]:
        """Write both generators (parameters and fixed inputs) to `out_dir`."""
        out_dir = Path(out_dir)
        paths = list(self.state.kernel_net.save(out_dir / "kernel_net"))
        paths += list(self.state.image_net.save(out_dir / "image_net"))
        return paths

    def load_networks(self, out_dir: Union[str, Path]) -> None:
        """Restore both generators written by `save_networks` (optimizer moments restart)."""
        out_dir = Path(out_dir)
        self.state.kernel_net.load(out_dir / "kernel_net")
        self.state.image_net.load(out_dir / "image_net")


def solve(
    y: np.ndarray,
    cfg: SolverConfig,
    gt: Optional[Tuple[np.ndarray, np.ndarray]] = None,
) -> Tuple[np.ndarray, np.ndarray, List[TraceRecord]]:
    """
    Estimate the HR image and blur kernel behind `y`.

    Returns:
        (HR image (h·s, w·s, C), kernel (4s+3)², trace with 2·iters rows)
    """
    result = MLMCSolver(y, cfg).run(gt)
    return result.image, result.kernel, result.trace
