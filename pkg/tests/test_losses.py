import numpy as np
import pytest

from clearsplat.decomposition import OpacityMap, sample_opacity_image
from clearsplat.losses import (
    LossBreakdown,
    opacity_loss,
    photometric_loss,
    sky_loss,
    total_loss,
)
from clearsplat.metrics import ssim
from helpers import assert_grads_close, fd_gradient

SZ = 16


def test_photometric_zero_for_identical():
    img = np.random.default_rng(0).uniform(0, 1, (SZ, SZ, 3))
    value, grad = photometric_loss(img, img)
    assert value == pytest.approx(0.0, abs=1e-12)


def test_photometric_constant_images_uses_metrics_ssim():
    a = np.zeros((SZ, SZ, 3))
    b = np.ones((SZ, SZ, 3))
    value, _ = photometric_loss(a, b)
    expected = 0.8 * 1.0 + 0.2 * (1.0 - ssim(a, b))
    assert value == pytest.approx(expected, rel=1e-9)


def test_photometric_gradient_matches_fd():
    rng = np.random.default_rng(1)
    render = rng.uniform(0.2, 0.8, (SZ, SZ, 3))
    target = rng.uniform(0, 1, (SZ, SZ, 3))

    _, grad = photometric_loss(render, target)
    fd = fd_gradient(lambda: photometric_loss(render, target)[0], render)
    assert_grads_close(grad, fd, label="photometric")


def test_photometric_shape_mismatch_raises():
    with pytest.raises(ValueError):
        photometric_loss(np.zeros((SZ, SZ, 3)), np.zeros((SZ, SZ + 1, 3)))


def test_opacity_loss_collapsed_map():
    m = OpacityMap.create(dtype=np.float64)
    m.logits[:] = -20.0
    value, _ = opacity_loss(m, 16, 16)
    assert value < 1e-8


def test_opacity_loss_half_map():
    m = OpacityMap.create(dtype=np.float64)
    m.logits[:] = 0.0
    value, _ = opacity_loss(m, 16, 16)
    assert value == pytest.approx(0.5, abs=1e-12)


def test_opacity_loss_is_mean_of_sampled_phi():
    m = OpacityMap.create(size=8, dtype=np.float64)
    m.logits[:] = np.random.default_rng(2).normal(size=(8, 8))
    value, _ = opacity_loss(m, 12, 10)
    phi = sample_opacity_image(m, 12, 10)
    assert value == pytest.approx(float(phi.mean()), rel=1e-12)


def test_opacity_loss_gradient_matches_fd():
    m = OpacityMap.create(size=6, dtype=np.float64)
    m.logits[:] = np.random.default_rng(3).normal(size=(6, 6))
    _, grad = opacity_loss(m, 8, 8)
    fd = fd_gradient(lambda: opacity_loss(m, 8, 8)[0], m.logits, step=1e-6)
    assert_grads_close(grad, fd, label="opacity logits")


def test_sky_loss_no_mask_is_zero():
    value, grad = sky_loss(np.ones((4, 4)), None)
    assert value == 0.0
    assert np.all(grad == 0)


def test_sky_loss_empty_alpha():
    value, _ = sky_loss(np.zeros((4, 4)), np.ones((4, 4), dtype=bool))
    assert value == 0.0


def test_sky_loss_half_covered():
    alpha = np.zeros((4, 4))
    alpha[:2] = 1.0
    value, grad = sky_loss(alpha, np.ones((4, 4), dtype=bool))
    assert value == pytest.approx(0.5)
    assert grad.sum() == pytest.approx(1.0)


def test_total_loss_paper_weights():
    bd = total_loss(pho=0.1, sky=0.0, opacity=0.5)
    assert bd.total == pytest.approx(0.1005, abs=1e-12)


def test_total_loss_zero_lambda_disables_term():
    bd = total_loss(pho=0.3, sky=0.7, opacity=123.0, lambda_opacity=0.0)
    assert bd.total == pytest.approx(0.3 + 0.001 * 0.7, abs=1e-15)


def test_total_loss_recombines_exactly():
    bd = LossBreakdown(pho=0.25, sky=0.125, opacity=2.0,
                       lambda_sky=0.001, lambda_opacity=0.001)
    assert bd.total == bd.pho + bd.lambda_sky * bd.sky + bd.lambda_opacity * bd.opacity


def test_total_loss_linear_in_lambda():
    a = total_loss(pho=0.1, sky=0.0, opacity=0.4, lambda_opacity=0.001)
    b = total_loss(pho=0.1, sky=0.0, opacity=0.4, lambda_opacity=0.002)
    assert (b.total - b.pho) == pytest.approx(2 * (a.total - a.pho), rel=1e-12)
