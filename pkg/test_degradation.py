"""
Tests for the degradation model, the image metrics and the bicubic baseline.

Run with:
    pytest test_degradation.py
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from skimage.metrics import structural_similarity

from src.degradation import (
    PSNR_CAP_DB,
    DegradationConfig,
    bicubic_upsample,
    blur,
    degrade,
    downsample,
    kernel_psnr,
    kernel_side_for_scale,
    luma_psnr,
    psnr,
    reconstruction_residual,
    rgb_to_luma,
    ssim,
)


def _reflect_index(i: int, n: int) -> int:
    if i < 0:
        return -i
    if i >= n:
        return 2 * (n - 1) - i
    return i


def _brute_force_degrade(x: np.ndarray, k: np.ndarray, s: int) -> np.ndarray:
    """Nested-loop (x ⊗ k)↓s with reflect padding."""
    h, w, channels = x.shape
    r = k.shape[0] // 2
    out = np.zeros((-(-h // s), -(-w // s), channels))
    for c in range(channels):
        for oi, i in enumerate(range(0, h, s)):
            for oj, j in enumerate(range(0, w, s)):
                total = 0.0
                for u in range(-r, r + 1):
                    for v in range(-r, r + 1):
                        total += k[u + r, v + r] * x[_reflect_index(i + u, h), _reflect_index(j + v, w), c]
                out[oi, oj, c] = total
    return out


# =============================================================================
# Forward model
# =============================================================================

def test_blur_and_downsample_match_brute_force_oracle():
    rng = np.random.default_rng(2024)
    for _ in range(50):
        x = rng.random((16, 16, 1))
        k = rng.random((11, 11))
        k /= k.sum()
        expected = _brute_force_degrade(x, k, 2)
        np.testing.assert_allclose(downsample(blur(x, k), 2), expected, rtol=0, atol=1e-12)


def test_degrade_output_size_is_ceil_of_input_over_scale():
    x = np.full((17, 20, 3), 0.5)
    k = np.zeros((7, 7))
    k[3, 3] = 1.0
    y = degrade(x, k, DegradationConfig(scale=3))
    assert y.shape == (6, 7, 3)


def test_delta_kernel_at_scale_one_is_identity():
    rng = np.random.default_rng(0)
    x = rng.random((12, 12, 1))
    k = np.zeros((7, 7))
    k[3, 3] = 1.0
    np.testing.assert_array_equal(degrade(x, k, DegradationConfig(scale=1)), x)


def test_noise_is_seeded_and_clamped():
    x = np.full((16, 16, 1), 0.99)
    k = np.zeros((3, 3))
    k[1, 1] = 1.0
    cfg = DegradationConfig(scale=1, noise_sigma=0.1, seed=5)
    y1, y2 = degrade(x, k, cfg), degrade(x, k, cfg)
    np.testing.assert_array_equal(y1, y2)
    assert y1.max() <= 1.0 and y1.min() >= 0.0
    assert not np.allclose(y1, x)


def test_noise_std_matches_sigma():
    x = np.full((64, 64, 1), 0.5)
    k = np.zeros((3, 3))
    k[1, 1] = 1.0
    for seed in range(10):
        y = degrade(x, k, DegradationConfig(scale=1, noise_sigma=0.0392, seed=seed))
        # mid-gray keeps every sample far from the clamp
        assert 0.85 * 0.0392 <= np.std(y - x) <= 1.15 * 0.0392


def test_blur_is_linear_in_the_image():
    rng = np.random.default_rng(8)
    k = rng.random((7, 7))
    k /= k.sum()
    for _ in range(10):
        x1, x2 = rng.random((16, 16, 2)), rng.random((16, 16, 2))
        alpha, beta = rng.normal(size=2)
        np.testing.assert_allclose(
            blur(alpha * x1 + beta * x2, k),
            alpha * blur(x1, k) + beta * blur(x2, k),
            rtol=0,
            atol=1e-12,
        )


def test_blur_rejects_even_kernels():
    with pytest.raises(ValueError, match="odd side"):
        blur(np.zeros((8, 8, 1)), np.ones((4, 4)) / 16)


def test_kernel_side_is_four_s_plus_three():
    assert [kernel_side_for_scale(s) for s in (2, 3, 4)] == [11, 15, 19]
    assert DegradationConfig(scale=2).kernel_side == 11


def test_reconstruction_residual_of_true_pair_is_zero():
    rng = np.random.default_rng(1)
    x = rng.random((16, 16, 1))
    k = rng.random((5, 5))
    k /= k.sum()
    y = downsample(blur(x, k), 2)
    assert np.max(np.abs(reconstruction_residual(y, x, k, 2))) == 0.0


# =============================================================================
# Metrics
# =============================================================================

def test_psnr_of_identical_images_is_capped():
    x = np.random.default_rng(0).random((8, 8, 3))
    assert psnr(x, x) == PSNR_CAP_DB


def test_psnr_of_known_mse():
    a = np.zeros((10, 10, 1))
    b = np.full((10, 10, 1), np.sqrt(1e-3))
    assert psnr(a, b) == pytest.approx(30.0, abs=1e-9)


def test_psnr_is_symmetric_and_falls_as_the_error_grows():
    rng = np.random.default_rng(4)
    a = 0.5 + 0.1 * rng.random((16, 16, 3))
    direction = 0.05 * rng.standard_normal(a.shape)
    assert psnr(a, a + direction) == psnr(a + direction, a)
    scores = [psnr(a, a + t * direction) for t in (0.1, 0.2, 0.4, 0.8, 1.6)]
    assert all(later < earlier for earlier, later in zip(scores, scores[1:]))


def test_psnr_shape_mismatch_names_both_shapes():
    with pytest.raises(ValueError, match=r"\[4, 4, 1\].*\[4, 5, 1\]"):
        psnr(np.zeros((4, 4, 1)), np.zeros((4, 5, 1)))


def test_ssim_of_identical_images_is_one():
    x = np.random.default_rng(0).random((32, 32, 1))
    assert ssim(x, x) == pytest.approx(1.0, abs=1e-12)


@pytest.mark.parametrize("channels", [1, 3])
def test_ssim_matches_scikit_image(channels):
    rng = np.random.default_rng(channels)
    a = rng.random((40, 36, channels))
    b = np.clip(a + 0.1 * rng.standard_normal(a.shape), 0, 1)
    expected = structural_similarity(
        a, b,
        gaussian_weights=True,
        sigma=1.5,
        use_sample_covariance=False,
        data_range=1.0,
        channel_axis=2,
    )
    assert ssim(a, b) == pytest.approx(expected, abs=1e-9)


def test_ssim_of_an_inverted_image_is_below_one():
    a = np.random.default_rng(5).random((32, 32, 1))
    assert ssim(a, 1.0 - a) < 1.0


def test_ssim_of_a_shifted_checkerboard_matches_scikit_image():
    rows, cols = np.indices((32, 32))
    a = ((rows + cols) % 2).astype(np.float64)[:, :, None]
    b = np.roll(a, 1, axis=1)
    expected = structural_similarity(
        a, b,
        gaussian_weights=True,
        sigma=1.5,
        use_sample_covariance=False,
        data_range=1.0,
        channel_axis=2,
    )
    assert ssim(a, b) == pytest.approx(expected, abs=1e-6)
    assert ssim(a, b) < 0.0


def test_ssim_rejects_images_smaller_than_window():
    with pytest.raises(ValueError, match="smaller"):
        ssim(np.zeros((8, 8, 1)), np.zeros((8, 8, 1)))


def test_kernel_psnr_conventions():
    k_gt = np.full((3, 3), 1.0 / 9.0)
    assert kernel_psnr(k_gt, k_gt) == PSNR_CAP_DB
    k_est = k_gt + 1e-3
    mse = 1e-6
    assert kernel_psnr(k_est, k_gt, peak="one") == pytest.approx(10 * np.log10(1.0 / mse), abs=1e-6)
    assert kernel_psnr(k_est, k_gt, peak="gt_max") == pytest.approx(10 * np.log10((1.0 / 9.0) ** 2 / mse), abs=1e-6)


def test_kernel_psnr_of_uniform_against_delta():
    side = 11
    uniform = np.full((side, side), 1.0 / side ** 2)
    delta = np.zeros((side, side))
    delta[5, 5] = 1.0
    mse = ((1 - 1 / 121) ** 2 + 120 * (1 / 121) ** 2) / 121
    assert kernel_psnr(uniform, delta) == pytest.approx(10 * np.log10(1.0 / mse), abs=1e-9)
    # peak comes from the second argument
    assert kernel_psnr(delta, uniform) == pytest.approx(10 * np.log10((1 / 121) ** 2 / mse), abs=1e-9)


def test_luma_uses_bt601_weights():
    rgb = np.zeros((2, 2, 3))
    rgb[:, :, 1] = 1.0
    np.testing.assert_allclose(rgb_to_luma(rgb), np.full((2, 2), 0.587))
    assert luma_psnr(rgb, rgb) == PSNR_CAP_DB


# =============================================================================
# Bicubic baseline
# =============================================================================

def test_bicubic_scale_one_is_a_copy():
    y = np.random.default_rng(0).random((5, 6, 1))
    out = bicubic_upsample(y, 1)
    np.testing.assert_array_equal(out, y)
    assert out is not y


def test_bicubic_keeps_decimated_samples():
    y = np.random.default_rng(0).random((8, 8, 1))
    np.testing.assert_allclose(bicubic_upsample(y, 2)[::2, ::2], y, atol=1e-12)


@settings(max_examples=20, deadline=None)
@given(st.floats(0.0, 1.0), st.integers(2, 4))
def test_bicubic_preserves_constant_images(value, s):
    y = np.full((6, 7, 1), value)
    out = bicubic_upsample(y, s)
    assert out.shape == (6 * s, 7 * s, 1)
    np.testing.assert_allclose(out, value, atol=1e-12)


def test_bicubic_reproduces_a_linear_ramp_away_from_the_border():
    n, s = 8, 2
    rows, cols = np.indices((n, n))
    y = (0.1 + 0.04 * rows + 0.03 * cols)[:, :, None]
    out = bicubic_upsample(y, s)
    # output pixel j sits at input coordinate j/s
    out_rows, out_cols = np.indices((n * s, n * s)) / s
    expected = 0.1 + 0.04 * out_rows + 0.03 * out_cols
    # interior pixels: all four taps land inside the image
    inner = slice(s, s * (n - 2))
    np.testing.assert_allclose(out[inner, inner, 0], expected[inner, inner], rtol=0, atol=1e-6)
