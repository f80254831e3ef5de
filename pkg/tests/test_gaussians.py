import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from clearsplat.splat.gaussians import (
    DegenerateCovarianceError,
    GaussianCloud,
    build_covariance,
    build_covariance_backward,
    eval_gaussian,
    inverse_sigmoid,
    quat_normalize,
    quat_normalize_backward,
    quat_to_rotmat,
    quat_to_rotmat_backward,
    sigmoid,
)
from helpers import assert_grads_close, fd_gradient


def test_eval_gaussian_at_mean_is_one():
    mu = np.array([1.0, -2.0, 3.0])
    assert eval_gaussian(mu, mu, np.eye(3)) == 1.0


def test_eval_gaussian_unit_offset_identity_cov():
    mu = np.zeros(3)
    x = mu + np.array([1.0, 0.0, 0.0])
    assert eval_gaussian(x, mu, np.eye(3)) == pytest.approx(np.exp(-0.5), abs=1e-12)


def test_eval_gaussian_anisotropic_matches_independent_inverse():
    cov = np.diag([4.0, 1.0, 1.0])
    mu = np.array([0.5, 0.5, 0.5])
    x = mu + np.array([2.0, 0.0, 0.0])
    d = x - mu
    expected = np.exp(-0.5 * d @ np.linalg.inv(cov) @ d)
    assert eval_gaussian(x, mu, cov) == pytest.approx(expected, rel=1e-12)
    assert expected == pytest.approx(np.exp(-0.5), rel=1e-12)


def test_eval_gaussian_singular_cov_raises():
    cov = np.diag([1.0, 1.0, 0.0])
    with pytest.raises(DegenerateCovarianceError):
        eval_gaussian(np.ones(3), np.zeros(3), cov)


def test_build_covariance_identity():
    q = np.array([1.0, 0.0, 0.0, 0.0])
    np.testing.assert_allclose(build_covariance(np.zeros(3), q), np.eye(3), atol=1e-12)


def test_build_covariance_scale_only():
    q = np.array([1.0, 0.0, 0.0, 0.0])
    ls = np.array([np.log(2.0), 0.0, 0.0])
    np.testing.assert_allclose(build_covariance(ls, q), np.diag([4.0, 1.0, 1.0]), atol=1e-12)


def test_build_covariance_rotated_matches_matmul():
    # 90 degrees about z swaps the x/y variances
    angle = np.pi / 2
    q = np.array([np.cos(angle / 2), 0.0, 0.0, np.sin(angle / 2)])
    ls = np.array([np.log(2.0), 0.0, 0.0])
    got = build_covariance(ls, q)
    R = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    S = np.diag(np.exp(ls))
    expected = R @ S @ S.T @ R.T
    np.testing.assert_allclose(got, expected, atol=1e-12)
    np.testing.assert_allclose(got, np.diag([1.0, 4.0, 1.0]), atol=1e-12)


@settings(deadline=None, max_examples=50)
@given(st.integers(0, 2**32 - 1))
def test_build_covariance_spd_property(seed):
    rng = np.random.default_rng(seed)
    ls = rng.uniform(-3.0, 1.0, (4, 3))
    q = rng.normal(size=(4, 4))
    cov = build_covariance(ls, q)
    np.testing.assert_allclose(cov, np.swapaxes(cov, -1, -2), atol=1e-10)
    eig = np.linalg.eigvalsh(cov)
    assert (eig > 0).all()


def test_quat_to_rotmat_orthonormal():
    rng = np.random.default_rng(0)
    q = quat_normalize(rng.normal(size=(8, 4)))
    R = quat_to_rotmat(q)
    eye = np.broadcast_to(np.eye(3), R.shape)
    np.testing.assert_allclose(np.swapaxes(R, -1, -2) @ R, eye, atol=1e-12)
    np.testing.assert_allclose(np.linalg.det(R), 1.0, atol=1e-12)


def test_quat_to_rotmat_backward_fd():
    rng = np.random.default_rng(1)
    q = quat_normalize(rng.normal(size=(3, 4)))
    W = rng.normal(size=(3, 3, 3))
    analytic = quat_to_rotmat_backward(q, W)
    fd = fd_gradient(lambda: float((W * quat_to_rotmat(q)).sum()), q, step=1e-6)
    assert_grads_close(analytic, fd, label="quat_to_rotmat")


def test_quat_normalize_backward_fd():
    rng = np.random.default_rng(2)
    q = rng.normal(size=(3, 4))
    W = rng.normal(size=(3, 4))
    analytic = quat_normalize_backward(q, W)
    fd = fd_gradient(lambda: float((W * quat_normalize(q)).sum()), q, step=1e-6)
    assert_grads_close(analytic, fd, label="quat_normalize")


def test_build_covariance_backward_fd():
    rng = np.random.default_rng(3)
    ls = rng.uniform(-1.0, 0.0, (3, 3))
    q = rng.normal(size=(3, 4))
    G = rng.normal(size=(3, 3, 3))
    G = G + np.swapaxes(G, 1, 2)  # upstream cov gradients are symmetric
    d_ls, d_q = build_covariance_backward(ls, q, G)

    def loss():
        return float((G * build_covariance(ls, q)).sum())

    assert_grads_close(d_ls, fd_gradient(loss, ls, step=1e-6), label="log_scale")
    assert_grads_close(d_q, fd_gradient(loss, q, step=1e-6), label="rotation")


def test_sigmoid_inverse_roundtrip():
    y = np.array([1e-6, 0.25, 0.5, 0.9, 1 - 1e-6])
    np.testing.assert_allclose(sigmoid(inverse_sigmoid(y)), y, rtol=1e-9)


def test_cloud_select_concat_roundtrip():
    rng = np.random.default_rng(4)
    a = GaussianCloud.from_points(rng.normal(size=(5, 3)), rng.uniform(0.1, 0.9, (5, 3)), 0.1)
    b = a.select(np.array([0, 2]))
    assert len(b) == 2
    c = GaussianCloud.concatenate(a, b)
    assert len(c) == 7
    np.testing.assert_array_equal(c.means[5], a.means[0])
