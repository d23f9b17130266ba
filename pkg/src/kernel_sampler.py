"""
Kernel Sampler Module

Random blur kernels for Monte Carlo simulation and for synthesizing test
data: rotated anisotropic Gaussians, a simplified random-walk motion blur,
and a delta kernel for debugging.

Every kernel is a square float64 grid with an odd side, nonnegative entries
and unit sum.
"""

import logging
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np
from scipy import ndimage

logger = logging.getLogger(__name__)

KERNEL_SUM_TOLERANCE = 1e-9
KERNEL_FAMILIES = ("gaussian", "motion")


@dataclass(frozen=True)
class GaussianParams:
    """
    Parameters of one anisotropic Gaussian kernel.

    Attributes:
        sigma1: Standard deviation along the horizontal (column) axis before rotation.
        sigma2: Standard deviation along the vertical (row) axis before rotation.
        theta: Rotation angle in radians.
        center: (cy, cx) offset of the mode from the geometric grid center.
    """

    sigma1: float
    sigma2: float
    theta: float = 0.0
    center: Tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if self.sigma1 <= 0 or self.sigma2 <= 0:
            raise ValueError(f"Gaussian widths must be > 0, got ({self.sigma1}, {self.sigma2})")


@dataclass(frozen=True)
class KernelRanges:
    """
    Everything the Monte Carlo sampler needs to draw a batch.

    Attributes:
        width_range: (lo, hi) for both sigmas.
        angle_range: (lo, hi) for theta in radians.
        center_jitter: Max absolute center offset per axis, in pixels.
        family: "gaussian" or "motion".
        motion_steps: Random-walk length for the motion family.
        vary_side: Draw an odd side <= the full side per kernel and zero-pad it.
    """

    width_range: Tuple[float, float]
    angle_range: Tuple[float, float] = (0.0, float(np.pi))
    center_jitter: float = 1.0
    family: str = "gaussian"
    motion_steps: int = 12
    vary_side: bool = False


def default_width_range(s: int, ood: bool = False) -> Tuple[float, float]:
    """Width range [0.175s, 2.5s], or the wider [0.35s, 5s] for out-of-distribution tests."""
    if ood:
        return 0.35 * s, 5.0 * s
    return 0.175 * s, 2.5 * s


def default_ranges(s: int, ood: bool = False, family: str = "gaussian") -> KernelRanges:
    """Sampling ranges used by synthesis and the solver for scale factor s."""
    return KernelRanges(width_range=default_width_range(s, ood), family=family)


def check_kernel(k: np.ndarray) -> None:
    """Raise ValueError unless `k` is a square odd-sided nonnegative grid summing to 1."""
    k = np.asarray(k)
    if k.ndim != 2 or k.shape[0] != k.shape[1] or k.shape[0] % 2 == 0:
        raise ValueError(f"Kernel must be square with an odd side, got shape {list(k.shape)}")
    if np.any(k < 0):
        raise ValueError(f"Kernel has negative entries (min {k.min():.3g})")
    if abs(float(k.sum()) - 1.0) > KERNEL_SUM_TOLERANCE:
        raise ValueError(f"Kernel must sum to 1, sums to {float(k.sum()):.12g}")


def _check_side(side: int) -> None:
    if side < 1 or side % 2 == 0:
        raise ValueError(f"Kernel side must be a positive odd integer, got {side}")


def delta_kernel(side: int) -> np.ndarray:
    """Identity kernel: 1 at the center, 0 elsewhere."""
    _check_side(side)
    k = np.zeros((side, side))
    k[side // 2, side // 2] = 1.0
    return k


def gaussian_kernel(p: GaussianParams, side: int) -> np.ndarray:
    """
    Discretize exp(-½ (h-h0)ᵀ C⁻¹ (h-h0)) with C = R(θ)·diag(σ1², σ2²)·R(θ)ᵀ on a side×side grid.

    If every entry underflows (tiny sigmas far from the grid points), the
    result is a delta at the rounded center.
    """
    _check_side(side)
    c, s = np.cos(p.theta), np.sin(p.theta)
    rotation = np.array([[c, -s], [s, c]])
    covariance = rotation @ np.diag([p.sigma1 ** 2, p.sigma2 ** 2]) @ rotation.T
    precision = np.linalg.inv(covariance)

    ax = np.arange(side) - side // 2
    rows, cols = np.meshgrid(ax - p.center[0], ax - p.center[1], indexing="ij")
    # (x, y) = (column, row) offsets from the mode
    offsets = np.stack([cols, rows], axis=-1)
    exponent = -0.5 * np.einsum("...i,ij,...j->...", offsets, precision, offsets)
    kernel = np.exp(exponent)

    total = kernel.sum()
    if not np.isfinite(total) or total <= 0:
        logger.debug(f"Gaussian kernel underflow for {p}; falling back to a delta")
        k = np.zeros((side, side))
        cy = int(np.clip(np.rint(side // 2 + p.center[0]), 0, side - 1))
        cx = int(np.clip(np.rint(side // 2 + p.center[1]), 0, side - 1))
        k[cy, cx] = 1.0
        return k
    return kernel / total


def sample_gaussian_params(
    rng: np.random.Generator,
    s: int,
    width_range: Optional[Tuple[float, float]] = None,
    angle_range: Tuple[float, float] = (0.0, float(np.pi)),
    center_jitter: float = 1.0,
) -> GaussianParams:
    """
    Draw sigma1, sigma2 ~ U(width_range), theta ~ U(angle_range), center ~ U(±jitter)².

    Args:
        rng: Seeded generator.
        s: Scale factor; sets the default width range [0.175s, 2.5s].
        width_range: Override (lo, hi), 0 < lo <= hi.
        angle_range: Rotation range in radians.
        center_jitter: Max center offset per axis, in pixels.
    """
    lo, hi = width_range if width_range is not None else default_width_range(s)
    if not 0 < lo <= hi:
        raise ValueError(f"Width range must satisfy 0 < lo <= hi, got ({lo}, {hi})")
    sigma1, sigma2 = rng.uniform(lo, hi, size=2)
    theta = rng.uniform(angle_range[0], angle_range[1])
    center = rng.uniform(-center_jitter, center_jitter, size=2)
    return GaussianParams(
        sigma1=float(sigma1),
        sigma2=float(sigma2),
        theta=float(theta),
        center=(float(center[0]), float(center[1])),
    )


def motion_kernel(rng: np.random.Generator, side: int, steps: int = 12) -> np.ndarray:
    """
    Random-walk motion blur: a momentum walk from the grid center, splatted
    bilinearly onto the grid, smoothed by a 1-pixel Gaussian and normalized.
    """
    _check_side(side)
    if steps < 1:
        raise ValueError(f"Motion kernel needs at least 1 step, got {steps}")

    center = side // 2
    lo, hi = min(1.0, center), max(side - 2.0, center)
    grid = np.zeros((side, side))
    position = np.array([float(center), float(center)])
    angle = rng.uniform(0.0, 2.0 * np.pi)

    for _ in range(steps):
        y, x = position
        y0, x0 = int(np.floor(y)), int(np.floor(x))
        fy, fx = y - y0, x - x0
        for dy, wy in ((0, 1 - fy), (1, fy)):
            for dx, wx in ((0, 1 - fx), (1, fx)):
                if 0 <= y0 + dy < side and 0 <= x0 + dx < side:
                    grid[y0 + dy, x0 + dx] += wy * wx
        angle += rng.normal(0.0, 0.6)
        step = rng.uniform(0.5, 1.0)
        position = np.clip(position + step * np.array([np.sin(angle), np.cos(angle)]), lo, hi)

    kernel = np.clip(ndimage.gaussian_filter(grid, sigma=1.0, mode="constant"), 0.0, None)
    return kernel / kernel.sum()


def _pad_to(k: np.ndarray, side: int) -> np.ndarray:
    margin = (side - k.shape[0]) // 2
    return np.pad(k, margin, mode="constant")


def sample_kernel(rng: np.random.Generator, s: int, ranges: KernelRanges, side: Optional[int] = None) -> np.ndarray:
    """Draw one kernel of the configured family at side `side` (default 4s+3)."""
    side = side if side is not None else 4 * s + 3
    draw_side = side
    if ranges.vary_side:
        draw_side = int(rng.choice(np.arange(3, side + 1, 2)))

    if ranges.family == "motion":
        k = motion_kernel(rng, draw_side, ranges.motion_steps)
    elif ranges.family == "gaussian":
        params = sample_gaussian_params(
            rng, s, ranges.width_range, ranges.angle_range, ranges.center_jitter
        )
        k = gaussian_kernel(params, draw_side)
    else:
        raise ValueError(f"Unknown kernel family '{ranges.family}', expected one of {KERNEL_FAMILIES}")
    return _pad_to(k, side)


def sample_kernel_batch(
    rng: np.random.Generator,
    T: int,
    s: int,
    ranges: Optional[KernelRanges] = None,
    side: Optional[int] = None,
) -> List[np.ndarray]:
    """
    Draw T independent kernels for one Monte Carlo pass.

    Args:
        rng: Seeded generator (same seed gives the same batch).
        T: Number of kernels, >= 1.
        s: Scale factor.
        ranges: Sampling ranges; defaults to `default_ranges(s)`.
        side: Grid side; defaults to 4s+3.
    """
    if T < 1:
        raise ValueError(f"Kernel batch size must be >= 1, got {T}")
    ranges = ranges if ranges is not None else default_ranges(s)
    return [sample_kernel(rng, s, ranges, side) for _ in range(T)]
