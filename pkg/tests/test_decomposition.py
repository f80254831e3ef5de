import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from clearsplat.decomposition import (
    OpacityMap,
    compose,
    compose_backward,
    compose_naive,
    pixel_grid_uv,
    recover_transmission,
    sample_opacity,
    sample_opacity_backward,
    sample_opacity_image,
)
from helpers import assert_grads_close, fd_gradient


def _omap(size=8, value=0.0):
    m = OpacityMap.create(size=size, dtype=np.float64)
    m.logits[:] = value
    return m


# -- sample_opacity ----------------------------------------------------------

def test_zero_logits_give_half():
    m = _omap(value=0.0)
    uv = np.random.default_rng(0).uniform(0, 1, (20, 2))
    np.testing.assert_allclose(sample_opacity(uv, m), 0.5, atol=1e-12)


def test_very_negative_logits():
    m = _omap(value=-10.0)
    phi = sample_opacity(np.array([[0.37, 0.61]]), m)
    assert phi[0] == pytest.approx(1.0 / (1.0 + np.exp(10.0)), rel=1e-9)
    assert phi[0] == pytest.approx(4.54e-5, rel=1e-2)


def test_cell_center_is_sigmoid_of_logit_mean():
    m = _omap(size=3)
    m.logits[:] = [[-2.0, 1.0, 0.0], [3.0, -1.0, 0.0], [0.0, 0.0, 0.0]]
    # center of the cell with corners (0,0),(1,0),(0,1),(1,1): grid coords (0.5, 0.5)
    uv = np.array([[0.5 / 2, 0.5 / 2]])
    expected = 1.0 / (1.0 + np.exp(-np.mean([-2.0, 1.0, 3.0, -1.0])))
    assert sample_opacity(uv, m)[0] == pytest.approx(expected, rel=1e-12)


def test_default_init_is_transmissive():
    m = OpacityMap.create()
    phi = sample_opacity_image(m, 16, 16)
    assert phi.shape == (16, 16)
    assert float(phi.max()) < 0.01


def test_sample_opacity_backward_matches_fd():
    m = _omap(size=5)
    rng = np.random.default_rng(1)
    m.logits[:] = rng.normal(size=(5, 5))
    uv = rng.uniform(0, 1, (7, 2))
    W = rng.normal(size=7)

    phi, cache = sample_opacity(uv, m, with_cache=True)
    grad = sample_opacity_backward(m, cache, W)
    fd = fd_gradient(lambda: float((W * sample_opacity(uv, m)).sum()), m.logits,
                     step=1e-6)
    assert_grads_close(grad, fd, label="opacity logits")


def test_pixel_grid_uv_centers():
    uv = pixel_grid_uv(4, 2)
    assert uv.shape == (8, 2)
    np.testing.assert_allclose(uv[0], [0.125, 0.25])
    np.testing.assert_allclose(uv[-1], [0.875, 0.75])


# -- compose -----------------------------------------------------------------

def test_compose_pure_transmission():
    rng = np.random.default_rng(2)
    it = rng.uniform(0, 1, (6, 6, 3))
    out = compose(it, np.zeros_like(it), np.zeros((6, 6)))
    np.testing.assert_array_equal(out, it)


def test_compose_nearly_opaque():
    rng = np.random.default_rng(3)
    it = rng.uniform(0, 1, (4, 4, 3))
    o = rng.uniform(0, 1, (4, 4, 3))
    out = compose(it, o, np.full((4, 4), 0.999))
    np.testing.assert_allclose(out, o, atol=1e-3 * it.max() + 1e-12)


def test_compose_arithmetic_example():
    it = np.full((2, 2, 3), 0.6)
    o = np.full((2, 2, 3), 0.12)
    phi = np.full((2, 2), 0.4)
    np.testing.assert_allclose(compose(it, o, phi), 0.48, atol=1e-12)


def test_compose_shape_mismatch_raises():
    with pytest.raises(ValueError):
        compose(np.zeros((2, 2, 3)), np.zeros((3, 3, 3)), np.zeros((2, 2)))
    with pytest.raises(ValueError):
        compose(np.zeros((2, 2, 3)), np.zeros((2, 2, 3)), np.zeros((3, 3)))


def test_compose_low_phi_is_additive():
    rng = np.random.default_rng(4)
    it = rng.uniform(0, 1, (5, 5, 3))
    o = rng.uniform(0, 0.3, (5, 5, 3))
    phi = 1.0 / (1.0 + np.exp(10.0)) * np.ones((5, 5))  # all logits -10
    out = compose(it, o, phi)
    assert np.abs(out - (it + o)).max() < 1e-4 * it.max()


def test_compose_backward_matches_fd():
    rng = np.random.default_rng(5)
    it = rng.uniform(0, 1, (4, 4, 3))
    o = rng.uniform(0, 0.5, (4, 4, 3))
    phi = rng.uniform(0.1, 0.9, (4, 4))
    G = rng.normal(size=(4, 4, 3))

    d_t, d_o, d_phi = compose_backward(it, phi, G)

    def loss():
        return float((G * compose(it, o, phi)).sum())

    assert_grads_close(d_t, fd_gradient(loss, it, step=1e-6), label="I_t")
    assert_grads_close(d_o, fd_gradient(loss, o, step=1e-6), label="O")
    assert_grads_close(d_phi, fd_gradient(loss, phi, step=1e-6), label="phi")


# -- compose_naive -----------------------------------------------------------

def test_naive_identity_weights():
    rng = np.random.default_rng(6)
    it = rng.uniform(0, 1, (3, 3, 3))
    np.testing.assert_array_equal(compose_naive(it, np.zeros_like(it), 1.0, 0.0), it)


def test_naive_fixed_weights_arithmetic():
    a = np.ones((2, 2, 3))
    b = np.full((2, 2, 3), 0.5)
    np.testing.assert_allclose(compose_naive(a, b, 0.8, 0.2), 0.9, atol=1e-12)


def test_naive_agrees_with_adaptive_for_constant_phi():
    rng = np.random.default_rng(7)
    it = rng.uniform(0, 1, (4, 4, 3))
    io = rng.uniform(0, 1, (4, 4, 3))
    c = 0.3
    adaptive = compose(it, c * io, np.full((4, 4), c))
    naive = compose_naive(it, c * io, 1.0 - c, 1.0)
    np.testing.assert_allclose(adaptive, naive, atol=1e-12)


# -- recover_transmission ----------------------------------------------------

def test_recover_identity_when_unobstructed():
    rng = np.random.default_rng(8)
    img = rng.uniform(0, 1, (4, 4, 3))
    out = recover_transmission(img, np.zeros_like(img), np.zeros((4, 4)),
                               np.zeros_like(img), tau=0.5)
    np.testing.assert_allclose(out, img, atol=1e-12)


def test_recover_uses_render_above_tau():
    rendered = np.full((2, 2, 3), 0.77)
    out = recover_transmission(np.ones((2, 2, 3)), np.zeros((2, 2, 3)),
                               np.full((2, 2), 0.9), rendered, tau=0.5)
    np.testing.assert_array_equal(out, rendered)


def test_recover_inverts_compose_example():
    captured = np.full((1, 1, 3), 0.48)
    o = np.full((1, 1, 3), 0.12)
    phi = np.full((1, 1), 0.4)
    out = recover_transmission(captured, o, phi, np.zeros((1, 1, 3)), tau=0.5)
    np.testing.assert_allclose(out, 0.6, atol=1e-12)


def test_recover_clamps_to_unit_range():
    captured = np.full((1, 1, 3), 1.0)
    o = np.full((1, 1, 3), -0.5)  # overshoot scenario
    phi = np.zeros((1, 1))
    out = recover_transmission(captured, o, phi, np.zeros((1, 1, 3)))
    assert float(out.max()) <= 1.0


def test_recover_rejects_bad_tau():
    z = np.zeros((1, 1, 3))
    with pytest.raises(ValueError):
        recover_transmission(z, z, np.zeros((1, 1)), z, tau=1.5)


@settings(deadline=None, max_examples=40)
@given(st.integers(0, 10_000))
def test_roundtrip_compose_recover(seed):
    rng = np.random.default_rng(seed)
    it = rng.uniform(0, 1, (6, 6, 3))
    phi = rng.uniform(0.0, 0.45, (6, 6))  # below tau everywhere
    o = rng.uniform(0, 0.4, (6, 6, 3)) * phi[..., None]  # premultiplied, in range
    composed = compose(it, o, phi)
    recovered = recover_transmission(composed, o, phi, np.zeros_like(it), tau=0.5)
    np.testing.assert_allclose(recovered, it, atol=1e-5)
