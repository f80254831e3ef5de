import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from clearsplat.metrics import (
    EmptyRegionError,
    MetricReport,
    evaluate_pair,
    obstruction_mask,
    psnr,
    ssim,
    to_gray,
)

SZ = 24  # comfortably larger than the 11px SSIM window


def _pair(seed, shape=(SZ, SZ, 3)):
    rng = np.random.default_rng(seed)
    return rng.uniform(0, 1, shape), rng.uniform(0, 1, shape)


# -- psnr ---------------------------------------------------------------------

def test_psnr_identical_capped():
    a, _ = _pair(0)
    assert psnr(a, a) == 99.0


def test_psnr_constant_halves():
    a = np.zeros((8, 8, 3))
    b = np.full((8, 8, 3), 0.5)
    assert psnr(a, b) == pytest.approx(10 * np.log10(1 / 0.25), abs=1e-9)
    assert psnr(a, b) == pytest.approx(6.0206, abs=1e-4)


def test_psnr_mask_selects_region():
    a, b = _pair(1)
    mask = np.zeros((SZ, SZ, 3), dtype=bool)
    mask[:4] = True
    b2 = b.copy()
    b2[:4] = a[:4]  # agree inside the mask, disagree outside
    assert psnr(a, b2, mask) == 99.0


def test_psnr_empty_mask_raises():
    a, b = _pair(2)
    with pytest.raises(EmptyRegionError):
        psnr(a, b, np.zeros((SZ, SZ, 3), dtype=bool))


def test_psnr_symmetric():
    a, b = _pair(3)
    assert psnr(a, b) == pytest.approx(psnr(b, a), abs=1e-12)


@settings(deadline=None, max_examples=20)
@given(st.integers(0, 1000))
def test_psnr_decreases_with_noise(seed):
    rng = np.random.default_rng(seed)
    a = rng.uniform(0.3, 0.7, (12, 12, 3))
    n = rng.standard_normal(a.shape)
    vals = [psnr(a, np.clip(a + amp * n, 0, 1)) for amp in (0.01, 0.05, 0.2)]
    assert vals[0] > vals[1] > vals[2]


# -- ssim ---------------------------------------------------------------------

def test_ssim_identical_is_one():
    a, _ = _pair(4)
    assert ssim(a, a) == pytest.approx(1.0, abs=1e-9)


def test_ssim_constant_images_closed_form():
    a = np.zeros((SZ, SZ, 3))
    b = np.ones((SZ, SZ, 3))
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    # mu_a=0, mu_b=1, all variances and covariance zero
    expected = (c1 * c2) / ((1 + c1) * c2)
    assert ssim(a, b) == pytest.approx(expected, rel=1e-9)


def test_ssim_range_and_symmetry():
    a, b = _pair(5)
    v = ssim(a, b)
    assert -1.0 <= v <= 1.0
    assert v == pytest.approx(ssim(b, a), abs=1e-12)


def test_ssim_small_image_raises():
    with pytest.raises(ValueError):
        ssim(np.zeros((8, 8, 3)), np.zeros((8, 8, 3)))


def test_ssim_empty_mask_raises():
    a, b = _pair(6)
    mask = np.zeros((SZ, SZ), dtype=bool)
    mask[0, 0] = True  # cropped away by the window margin
    with pytest.raises(EmptyRegionError):
        ssim(a, b, mask)


def _reference_ssim(a, b):
    """Independent sliding-window implementation (direct loops, no shared code)."""
    ga, gb = to_gray(a), to_gray(b)
    x = np.arange(11) - 5
    k1d = np.exp(-0.5 * (x / 1.5) ** 2)
    k1d /= k1d.sum()
    k2d = np.outer(k1d, k1d)
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    h, w = ga.shape
    vals = []
    for cy in range(5, h - 5):
        for cx in range(5, w - 5):
            wa = ga[cy - 5:cy + 6, cx - 5:cx + 6]
            wb = gb[cy - 5:cy + 6, cx - 5:cx + 6]
            mu_a = (k2d * wa).sum()
            mu_b = (k2d * wb).sum()
            va = (k2d * wa * wa).sum() - mu_a ** 2
            vb = (k2d * wb * wb).sum() - mu_b ** 2
            cov = (k2d * wa * wb).sum() - mu_a * mu_b
            vals.append(((2 * mu_a * mu_b + c1) * (2 * cov + c2))
                        / ((mu_a ** 2 + mu_b ** 2 + c1) * (va + vb + c2)))
    return float(np.mean(vals))


def test_ssim_matches_independent_reference():
    for seed in (7, 8, 9):
        a, b = _pair(seed, shape=(16, 18, 3))
        assert ssim(a, b) == pytest.approx(_reference_ssim(a, b), abs=1e-4)


def test_ssim_mask_restricts_to_window_centers():
    a, b = _pair(10)
    mask = np.zeros((SZ, SZ), dtype=bool)
    mask[10:14, 10:14] = True
    v = ssim(a, b, mask)
    assert -1.0 <= v <= 1.0
    b2 = b.copy()
    b2[:2] = 0.0  # far from the masked windows: no effect
    assert ssim(a, b2, mask) == pytest.approx(v, abs=1e-12)


# -- report -------------------------------------------------------------------

def test_evaluate_pair_report():
    a, _ = _pair(11)
    rep = evaluate_pair(a, a, region="full")
    assert rep == MetricReport(psnr=99.0, ssim=pytest.approx(1.0, abs=1e-9), region="full")


def test_obstruction_mask_threshold():
    phi = np.array([[0.0, 0.05], [0.051, 0.9]])
    np.testing.assert_array_equal(obstruction_mask(phi),
                                  [[False, False], [True, True]])
