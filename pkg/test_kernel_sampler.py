"""
Tests for the random blur-kernel sampler.

Run with:
    pytest test_kernel_sampler.py
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from src.kernel_sampler import (
    KERNEL_SUM_TOLERANCE,
    GaussianParams,
    KernelRanges,
    check_kernel,
    default_ranges,
    default_width_range,
    delta_kernel,
    gaussian_kernel,
    motion_kernel,
    sample_gaussian_params,
    sample_kernel,
    sample_kernel_batch,
)


def _assert_valid(k: np.ndarray, side: int):
    assert k.shape == (side, side)
    assert np.all(k >= 0)
    assert abs(k.sum() - 1.0) <= KERNEL_SUM_TOLERANCE


# =============================================================================
# Validity
# =============================================================================

@pytest.mark.parametrize(
    "ranges",
    [default_ranges(2), default_ranges(2, ood=True), default_ranges(2, family="motion")],
    ids=["gaussian", "ood", "motion"],
)
def test_sampled_kernels_are_valid(ranges):
    rng = np.random.default_rng(7)
    for k in sample_kernel_batch(rng, 3400, 2, ranges):
        _assert_valid(k, 11)


@pytest.mark.parametrize("s", [2, 3, 4])
def test_kernel_side_follows_scale(s):
    k = sample_kernel(np.random.default_rng(0), s, default_ranges(s))
    assert k.shape == (4 * s + 3, 4 * s + 3)


def test_vary_side_kernels_are_zero_padded_to_full_side():
    ranges = KernelRanges(width_range=(0.35, 1.0), vary_side=True)
    rng = np.random.default_rng(3)
    kernels = sample_kernel_batch(rng, 50, 2, ranges)
    for k in kernels:
        _assert_valid(k, 11)
    assert any(np.all(k[0] == 0) for k in kernels)


def test_check_kernel_rejects_bad_kernels():
    with pytest.raises(ValueError, match="odd side"):
        check_kernel(np.ones((4, 4)) / 16)
    with pytest.raises(ValueError, match="negative"):
        check_kernel(np.array([[0.5, -0.1, 0.6], [0.0, 0.0, 0.0], [0.0, 0.0, 0.0]]))
    with pytest.raises(ValueError, match="sum to 1"):
        check_kernel(np.ones((3, 3)))


# =============================================================================
# Gaussian family
# =============================================================================

def test_default_width_ranges():
    assert default_width_range(2) == pytest.approx((0.35, 5.0))
    assert default_width_range(2, ood=True) == pytest.approx((0.7, 10.0))


def test_sampled_parameters_stay_in_range():
    rng = np.random.default_rng(11)
    for _ in range(500):
        p = sample_gaussian_params(rng, 2, default_width_range(2, ood=True))
        assert 0.7 <= p.sigma1 <= 10.0 and 0.7 <= p.sigma2 <= 10.0
        assert 0.0 <= p.theta <= np.pi
        assert abs(p.center[0]) <= 1.0 and abs(p.center[1]) <= 1.0


def test_isotropic_gaussian_is_symmetric_and_peaks_at_center():
    k = gaussian_kernel(GaussianParams(1.5, 1.5), 11)
    np.testing.assert_allclose(k, k.T, atol=1e-15)
    np.testing.assert_allclose(k, k[::-1, ::-1], atol=1e-15)
    assert np.unravel_index(np.argmax(k), k.shape) == (5, 5)


def test_rotation_by_quarter_turn_swaps_axes():
    wide = gaussian_kernel(GaussianParams(3.0, 1.0, theta=0.0), 11)
    tall = gaussian_kernel(GaussianParams(3.0, 1.0, theta=np.pi / 2), 11)
    np.testing.assert_allclose(wide, tall.T, atol=1e-12)
    # sigma1 runs along columns before rotation
    assert wide[5, 8] > wide[8, 5]


def test_half_turn_leaves_the_kernel_unchanged():
    rng = np.random.default_rng(12)
    for _ in range(20):
        p = sample_gaussian_params(rng, 2)
        turned = GaussianParams(p.sigma1, p.sigma2, theta=p.theta + np.pi, center=p.center)
        np.testing.assert_allclose(gaussian_kernel(turned, 11), gaussian_kernel(p, 11), rtol=0, atol=1e-12)


def test_unit_isotropic_gaussian_matches_the_closed_form():
    k = gaussian_kernel(GaussianParams(1.0, 1.0), 11)
    ax = np.arange(11) - 5
    total = np.sum(np.exp(-(ax[:, None] ** 2 + ax[None, :] ** 2) / 2.0))
    assert k[5, 5] == pytest.approx(1.0 / total, rel=1e-12)


def test_isotropic_gaussian_is_invariant_under_grid_symmetries():
    k = gaussian_kernel(GaussianParams(2.2, 2.2, theta=0.7), 11)
    for image in (np.rot90(k), np.rot90(k, 2), np.fliplr(k), np.flipud(k)):
        np.testing.assert_allclose(image, k, rtol=0, atol=1e-12)


def test_kernel_is_continuous_in_the_widths():
    base = gaussian_kernel(GaussianParams(1.5, 2.5, theta=0.3), 11)
    nudged = gaussian_kernel(GaussianParams(1.5 + 1e-6, 2.5 - 1e-6, theta=0.3), 11)
    assert np.max(np.abs(nudged - base)) < 1e-4


def test_sampled_widths_are_uniform_over_the_range():
    rng = np.random.default_rng(21)
    lo, hi = default_width_range(2)
    widths = []
    for _ in range(10_000):
        p = sample_gaussian_params(rng, 2)
        widths.extend([p.sigma1, p.sigma2])
    assert abs(np.mean(widths) - (lo + hi) / 2) <= 0.03 * (lo + hi) / 2


def test_degenerate_width_range_pins_both_widths():
    p = sample_gaussian_params(np.random.default_rng(0), 2, width_range=(1.0, 1.0))
    assert p.sigma1 == 1.0 and p.sigma2 == 1.0


def test_center_offset_moves_the_mode():
    k = gaussian_kernel(GaussianParams(0.5, 0.5, center=(1.0, -1.0)), 11)
    assert np.unravel_index(np.argmax(k), k.shape) == (6, 4)


def test_tiny_widths_fall_back_to_a_delta():
    k = gaussian_kernel(GaussianParams(1e-4, 1e-4, center=(0.5, 0.5)), 7)
    _assert_valid(k, 7)


def test_gaussian_params_reject_non_positive_widths():
    with pytest.raises(ValueError, match="> 0"):
        GaussianParams(0.0, 1.0)


@settings(max_examples=50, deadline=None)
@given(
    st.floats(0.2, 12.0),
    st.floats(0.2, 12.0),
    st.floats(0.0, float(np.pi)),
    st.sampled_from([3, 7, 11, 15, 19]),
)
def test_gaussian_kernels_are_valid_for_any_parameters(sigma1, sigma2, theta, side):
    _assert_valid(gaussian_kernel(GaussianParams(sigma1, sigma2, theta), side), side)


# =============================================================================
# Other families
# =============================================================================

def test_delta_kernel():
    k = delta_kernel(5)
    _assert_valid(k, 5)
    assert k[2, 2] == 1.0


def test_motion_kernel_is_seeded():
    a = motion_kernel(np.random.default_rng(4), 11)
    b = motion_kernel(np.random.default_rng(4), 11)
    np.testing.assert_array_equal(a, b)


def test_motion_kernels_spread_over_several_cells():
    rng = np.random.default_rng(6)
    for _ in range(100):
        k = motion_kernel(rng, 11)
        _assert_valid(k, 11)
        assert np.count_nonzero(k > 0.01 * k.max()) >= 2


def test_single_step_motion_kernel_is_valid():
    _assert_valid(motion_kernel(np.random.default_rng(0), 11, steps=1), 11)


def test_batch_is_reproducible_for_a_seed():
    a = sample_kernel_batch(np.random.default_rng(9), 10, 2)
    b = sample_kernel_batch(np.random.default_rng(9), 10, 2)
    for ka, kb in zip(a, b):
        np.testing.assert_array_equal(ka, kb)


def test_batch_size_must_be_positive():
    with pytest.raises(ValueError, match=">= 1"):
        sample_kernel_batch(np.random.default_rng(0), 0, 2)


def test_singleton_batch():
    kernels = sample_kernel_batch(np.random.default_rng(0), 1, 2)
    assert len(kernels) == 1
    _assert_valid(kernels[0], 11)
