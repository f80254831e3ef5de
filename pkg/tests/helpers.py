"""Shared test utilities: finite-difference oracles and small scene builders."""

import numpy as np

from clearsplat.camera import Camera
from clearsplat.splat import GaussianCloud

FD_STEP = 1e-4
FD_RTOL = 1e-3
FD_GATE = 1e-8  # components below this magnitude are not compared


def fd_gradient(f, arr, step=FD_STEP):
    """Central finite differences of scalar f w.r.t. every entry of arr (in place)."""
    g = np.zeros_like(arr, dtype=np.float64)
    for idx in np.ndindex(arr.shape):
        orig = arr[idx]
        arr[idx] = orig + step
        lp = f()
        arr[idx] = orig - step
        lm = f()
        arr[idx] = orig
        g[idx] = (lp - lm) / (2 * step)
    return g


def assert_grads_close(analytic, fd, rtol=FD_RTOL, gate=FD_GATE, label=""):
    analytic = np.asarray(analytic, dtype=np.float64)
    fd = np.asarray(fd, dtype=np.float64)
    mag = np.maximum(np.abs(analytic), np.abs(fd))
    active = mag > gate
    if not active.any():
        return
    rel = np.abs(analytic - fd)[active] / mag[active]
    worst = rel.max()
    assert worst < rtol, (
        f"{label}: worst relative gradient error {worst:.3e} >= {rtol:.0e} "
        f"(analytic {analytic[active][rel.argmax()]:.6g} vs fd {fd[active][rel.argmax()]:.6g})"
    )


def random_cloud(rng, n, depth_range=(2.0, 4.0), dtype=np.float64) -> GaussianCloud:
    cloud = GaussianCloud(
        means=np.concatenate(
            [rng.uniform(-0.6, 0.6, (n, 2)), rng.uniform(*depth_range, (n, 1))], axis=1),
        log_scales=rng.uniform(np.log(0.08), np.log(0.3), (n, 3)),
        rotations=rng.normal(size=(n, 4)),
        opacity_logits=rng.uniform(-1.0, 2.0, n),
        color_logits=rng.uniform(-2.0, 2.0, (n, 3)),
    ).astype(dtype)
    cloud.normalize_rotations()
    return cloud


def simple_camera(size=16, f=20.0) -> Camera:
    w2c = np.hstack([np.eye(3), np.zeros((3, 1))])
    return Camera(fx=f, fy=f, cx=size / 2, cy=size / 2,
                  width=size, height=size, world_to_camera=w2c)
