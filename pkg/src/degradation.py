"""
Degradation Module

The forward model of blind super-resolution,

    y = clamp((x ⊗ k)↓s + n, 0, 1),

and the metrics used to score a reconstruction: image PSNR (full channel and
luma), SSIM, kernel PSNR, plus a Catmull-Rom bicubic upsampler that serves as
the non-blind baseline.

Conventions shared project-wide:
    - Images are float64 arrays of shape (H, W, C) with values in [0, 1].
    - ⊗ is 2-D correlation (no kernel flip) with reflect padding
      (d c b | a b c d | c b a), applied per channel.
    - ↓s keeps every s-th pixel starting at index 0.
    - Noise is added after downsampling and before clamping.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import ndimage

# PSNR reported for identical inputs
PSNR_CAP_DB = 100.0

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


@dataclass
class DegradationConfig:
    """
    Parameters of the synthetic degradation.

    Attributes:
        scale: Downsampling factor s (2, 3 or 4 for experiments; 1 for debugging).
        noise_sigma: AWGN standard deviation as a fraction of the peak value,
            e.g. 0.0392 for 3.92% noise.
        seed: Seed for the noise generator.
    """

    scale: int = 2
    noise_sigma: float = 0.0
    seed: int = 0

    @property
    def kernel_side(self) -> int:
        return kernel_side_for_scale(self.scale)


def kernel_side_for_scale(scale: int) -> int:
    """Kernel grid side 4s+3 used for scale factor s."""
    return 4 * scale + 3


def as_image(array: np.ndarray) -> np.ndarray:
    """Return an (H, W, C) float64 copy clamped to [0, 1]; 2-D input gains C=1."""
    image = np.asarray(array, dtype=np.float64)
    if image.ndim == 2:
        image = image[:, :, None]
    if image.ndim != 3 or image.shape[2] not in (1, 3):
        raise ValueError(f"Expected an image of shape (H, W, 1|3), got {list(image.shape)}")
    return np.clip(image, 0.0, 1.0)


def _check_same_shape(name: str, a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{name}: shape mismatch between {list(a.shape)} and {list(b.shape)}")


# =============================================================================
# Forward model
# =============================================================================

def blur(x: np.ndarray, k: np.ndarray) -> np.ndarray:
    """
    Correlate every channel of `x` with kernel `k` using reflect padding.

    Args:
        x: Image (H, W, C).
        k: Odd-sided square kernel.

    Returns:
        np.ndarray: Blurred image, same shape as x. Values are not clamped.

    Raises:
        ValueError: Even-sided or non-square kernel.
    """
    k = np.asarray(k, dtype=np.float64)
    if k.ndim != 2 or k.shape[0] != k.shape[1] or k.shape[0] % 2 == 0:
        raise ValueError(f"blur: kernel must be square with an odd side, got shape {list(k.shape)}")
    x = np.asarray(x, dtype=np.float64)
    # scipy's "mirror" mode is numpy's "reflect" (edge pixel not repeated)
    return np.stack(
        [ndimage.correlate(x[:, :, c], k, mode="mirror") for c in range(x.shape[2])],
        axis=2,
    )


def downsample(x: np.ndarray, s: int) -> np.ndarray:
    """Keep every s-th pixel from index 0 along both axes (output dims ceil(dim/s))."""
    if s < 1:
        raise ValueError(f"downsample: scale must be >= 1, got {s}")
    return np.asarray(x)[::s, ::s]


def degrade(
    x: np.ndarray,
    k: np.ndarray,
    cfg: DegradationConfig,
    rng: Optional[np.random.Generator] = None,
) -> np.ndarray:
    """
    Synthesize an LR observation y = clamp((x ⊗ k)↓s + n, 0, 1).

    Args:
        x: HR image (H, W, C) in [0, 1].
        k: Blur kernel, odd side, sums to 1.
        cfg: Scale and noise level.
        rng: Noise generator; defaults to one seeded from `cfg.seed`.

    Returns:
        np.ndarray: LR image (ceil(H/s), ceil(W/s), C).
    """
    y = downsample(blur(x, k), cfg.scale)
    if cfg.noise_sigma > 0:
        rng = rng if rng is not None else np.random.default_rng(cfg.seed)
        y = y + rng.normal(0.0, cfg.noise_sigma, size=y.shape)
    return np.clip(y, 0.0, 1.0)


def reconstruction_residual(y: np.ndarray, x: np.ndarray, k: np.ndarray, s: int) -> np.ndarray:
    """Residual y - (x ⊗ k)↓s of a candidate (x, k) pair against an observation."""
    predicted = downsample(blur(x, k), s)
    _check_same_shape("reconstruction_residual", y, predicted)
    return y - predicted


# =============================================================================
# Metrics
# =============================================================================

def _psnr_from_mse(mse: float, peak: float) -> float:
    if mse <= 0:
        return PSNR_CAP_DB
    return float(min(PSNR_CAP_DB, 10.0 * np.log10(peak * peak / mse)))


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """PSNR in dB over all channels with peak 1; identical inputs give 100 dB."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    _check_same_shape("psnr", a, b)
    return _psnr_from_mse(float(np.mean((a - b) ** 2)), 1.0)


def rgb_to_luma(image: np.ndarray) -> np.ndarray:
    """BT.601 luma of an RGB image in [0, 1]; single-channel input passes through."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 3 and image.shape[2] == 3:
        return image @ np.array([0.299, 0.587, 0.114])
    return image.reshape(image.shape[0], image.shape[1])


def luma_psnr(a: np.ndarray, b: np.ndarray) -> float:
    """PSNR on the luma channel only."""
    _check_same_shape("luma_psnr", np.asarray(a), np.asarray(b))
    return psnr(rgb_to_luma(a), rgb_to_luma(b))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    """Normalized size×size Gaussian window."""
    ax = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(ax ** 2) / (2.0 * sigma ** 2))
    window = np.outer(g, g)
    return window / window.sum()


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """
    Mean structural similarity with an 11×11 Gaussian window (sigma 1.5).

    Local statistics are taken over every full window inside the image (no
    padding); the per-channel means are averaged.

    Raises:
        ValueError: Shape mismatch, or an image smaller than the window.
    """
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    _check_same_shape("ssim", a, b)
    if a.ndim == 2:
        a, b = a[:, :, None], b[:, :, None]
    if min(a.shape[0], a.shape[1]) < SSIM_WINDOW:
        raise ValueError(
            f"ssim: image {list(a.shape)} is smaller than the {SSIM_WINDOW}×{SSIM_WINDOW} window"
        )

    window = gaussian_window()
    c1, c2 = (SSIM_K1 * 1.0) ** 2, (SSIM_K2 * 1.0) ** 2

    def local_mean(channel: np.ndarray) -> np.ndarray:
        patches = sliding_window_view(channel, window.shape)
        return np.tensordot(patches, window, axes=([2, 3], [0, 1]))

    scores = []
    for c in range(a.shape[2]):
        u, v = a[:, :, c], b[:, :, c]
        mu_u, mu_v = local_mean(u), local_mean(v)
        var_u = local_mean(u * u) - mu_u ** 2
        var_v = local_mean(v * v) - mu_v ** 2
        cov = local_mean(u * v) - mu_u * mu_v
        score = ((2 * mu_u * mu_v + c1) * (2 * cov + c2)) / (
            (mu_u ** 2 + mu_v ** 2 + c1) * (var_u + var_v + c2)
        )
        scores.append(score.mean())
    return float(np.mean(scores))


def kernel_psnr(k_est: np.ndarray, k_gt: np.ndarray, peak: str = "gt_max") -> float:
    """
    PSNR between an estimated and a ground-truth kernel grid.

    Args:
        k_est: Estimated kernel.
        k_gt: Ground-truth kernel of the same side.
        peak: "gt_max" uses max(k_gt) as the peak value, "one" uses 1.

    Returns:
        float: 10·log10(peak² / MSE), capped at 100 dB. Not symmetric in its
        arguments when peak="gt_max".
    """
    k_est, k_gt = np.asarray(k_est, dtype=np.float64), np.asarray(k_gt, dtype=np.float64)
    _check_same_shape("kernel_psnr", k_est, k_gt)
    if peak not in ("gt_max", "one"):
        raise ValueError(f"kernel_psnr: unknown peak convention '{peak}'")
    peak_value = float(k_gt.max()) if peak == "gt_max" else 1.0
    return _psnr_from_mse(float(np.mean((k_est - k_gt) ** 2)), peak_value)


# =============================================================================
# Bicubic baseline
# =============================================================================

def _cubic_weights(t: np.ndarray, a: float = -0.5) -> np.ndarray:
    """Catmull-Rom weights for the 4 taps at offsets -1, 0, 1, 2 of fractional position t."""
    d = np.stack([1 + t, t, 1 - t, 2 - t], axis=-1)
    near = (a + 2) * d ** 3 - (a + 3) * d ** 2 + 1
    far = a * d ** 3 - 5 * a * d ** 2 + 8 * a * d - 4 * a
    return np.where(d <= 1, near, far)


def _resize_axis(image: np.ndarray, s: int, axis: int) -> np.ndarray:
    n = image.shape[axis]
    # Output pixel j sits at input coordinate j/s (aligned with stride-0 decimation)
    pos = np.arange(n * s) / s
    base = np.floor(pos).astype(int)
    weights = _cubic_weights(pos - base)
    taps = np.clip(base[:, None] + np.arange(-1, 3)[None, :], 0, n - 1)
    gathered = np.take(image, taps, axis=axis)  # axis expands to (n*s, 4)
    shape = [1] * gathered.ndim
    shape[axis], shape[axis + 1] = n * s, 4
    return np.sum(gathered * weights.reshape(shape), axis=axis + 1)


def bicubic_upsample(y: np.ndarray, s: int) -> np.ndarray:
    """
    Separable Catmull-Rom (a = -0.5) upsampling by an integer factor, clamped to [0, 1].

    Borders replicate the edge pixel.
    """
    if s < 1:
        raise ValueError(f"bicubic_upsample: scale must be >= 1, got {s}")
    y = np.asarray(y, dtype=np.float64)
    if s == 1:
        return y.copy()
    out = _resize_axis(_resize_axis(y, s, axis=0), s, axis=1)
    return np.clip(out, 0.0, 1.0)
