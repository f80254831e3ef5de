"""Project 3D Gaussians to screen-space splats (EWA) with analytic backward.

Forward: t = R mu + tr (camera frame), mean2d by pinhole projection,
cov2d = J V J^T + lowpass*I where V = R Sigma R^T and J is the projection
Jacobian at t. The backward chains gradients w.r.t. mean2d/cov2d/depth all
the way to mean, log_scale and rotation, including the dependence of J on
the camera-frame mean.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..camera import Camera
from .gaussians import GaussianCloud, build_covariance, build_covariance_backward

LOWPASS_PX2 = 0.3      # anti-collapse floor added to cov2d diagonals, px^2
CULL_MARGIN = 1.3      # cull when the projected center leaves 1.3x image bounds


@dataclass
class ProjectionCache:
    """Everything the projection backward needs, for visible Gaussians only."""

    visible: np.ndarray    # (N,) bool mask over the input cloud
    idx: np.ndarray        # (M,) indices of visible Gaussians
    mean2d: np.ndarray     # (M, 2) pixels
    cov2d: np.ndarray      # (M, 2, 2) pixels^2, lowpass included
    depth: np.ndarray      # (M,) camera z
    t: np.ndarray          # (M, 3) camera-frame means
    J: np.ndarray          # (M, 2, 3) projection Jacobians
    V: np.ndarray          # (M, 3, 3) camera-frame covariances
    Sigma: np.ndarray      # (M, 3, 3) world covariances


def project_gaussians(cloud: GaussianCloud, cam: Camera,
                      near: float | None = None) -> ProjectionCache:
    """Project all Gaussians; behind-camera and far-off-frame ones are culled."""
    near = cam.near if near is None else near
    dtype = cloud.dtype
    R = cam.rotation.astype(dtype)
    tr = cam.translation.astype(dtype)

    t = cloud.means @ R.T + tr
    # z == 0 rows produce inf/nan here but are culled by the near test below
    with np.errstate(divide="ignore", invalid="ignore"):
        u = cam.fx * t[:, 0] / t[:, 2] + cam.cx
        v = cam.fy * t[:, 1] / t[:, 2] + cam.cy

    margin_x = (CULL_MARGIN - 1.0) * cam.width
    margin_y = (CULL_MARGIN - 1.0) * cam.height
    visible = (
        (t[:, 2] > near)
        & (u > -margin_x) & (u < cam.width + margin_x)
        & (v > -margin_y) & (v < cam.height + margin_y)
    )
    idx = np.nonzero(visible)[0]

    tv = t[idx]
    Sigma = build_covariance(cloud.log_scales[idx], cloud.rotations[idx]).astype(dtype)
    V = R @ Sigma @ R.T if len(idx) else Sigma

    tx, ty, tz = tv[:, 0], tv[:, 1], tv[:, 2]
    inv_z = 1.0 / tz
    J = np.zeros((len(idx), 2, 3), dtype=dtype)
    J[:, 0, 0] = cam.fx * inv_z
    J[:, 0, 2] = -cam.fx * tx * inv_z * inv_z
    J[:, 1, 1] = cam.fy * inv_z
    J[:, 1, 2] = -cam.fy * ty * inv_z * inv_z

    cov2d = J @ V @ np.swapaxes(J, 1, 2)
    cov2d[:, 0, 0] += dtype.type(LOWPASS_PX2)
    cov2d[:, 1, 1] += dtype.type(LOWPASS_PX2)

    mean2d = np.stack([u[idx], v[idx]], axis=1)
    return ProjectionCache(
        visible=visible, idx=idx, mean2d=mean2d, cov2d=cov2d,
        depth=tz.copy(), t=tv, J=J, V=V, Sigma=Sigma,
    )


def project_gaussians_backward(cloud: GaussianCloud, cam: Camera,
                               cache: ProjectionCache,
                               d_mean2d: np.ndarray, d_cov2d: np.ndarray,
                               d_depth: np.ndarray):
    """Chain splat-space gradients back to (means, log_scales, rotations).

    Gradient arrays are indexed like the cache (visible Gaussians);
    returns full-cloud arrays with zeros for culled Gaussians.
    """
    dtype = cloud.dtype
    R = cam.rotation.astype(dtype)
    J, V, tv = cache.J, cache.V, cache.t
    tx, ty, tz = tv[:, 0], tv[:, 1], tv[:, 2]
    inv_z = 1.0 / tz
    inv_z2 = inv_z * inv_z

    # cov2d = J V J^T (+ const): dV = J^T G J, dJ = (G + G^T) J V
    G = d_cov2d
    dV = np.swapaxes(J, 1, 2) @ G @ J
    dJ = (G + np.swapaxes(G, 1, 2)) @ J @ V
    dSigma = R.T @ dV @ R

    # J entries depend on t
    dt = np.zeros_like(tv)
    dt[:, 0] += dJ[:, 0, 2] * (-cam.fx * inv_z2)
    dt[:, 1] += dJ[:, 1, 2] * (-cam.fy * inv_z2)
    dt[:, 2] += (
        dJ[:, 0, 0] * (-cam.fx * inv_z2)
        + dJ[:, 1, 1] * (-cam.fy * inv_z2)
        + dJ[:, 0, 2] * (2 * cam.fx * tx * inv_z2 * inv_z)
        + dJ[:, 1, 2] * (2 * cam.fy * ty * inv_z2 * inv_z)
    )

    # mean2d = (fx tx/tz + cx, fy ty/tz + cy): its Jacobian w.r.t. t is J
    dt[:, 0] += d_mean2d[:, 0] * cam.fx * inv_z
    dt[:, 1] += d_mean2d[:, 1] * cam.fy * inv_z
    dt[:, 2] += (d_mean2d[:, 0] * (-cam.fx * tx * inv_z2)
                 + d_mean2d[:, 1] * (-cam.fy * ty * inv_z2))
    dt[:, 2] += d_depth

    d_means_vis = dt @ R
    d_log_scales_vis, d_rotations_vis = build_covariance_backward(
        cloud.log_scales[cache.idx], cloud.rotations[cache.idx], dSigma.astype(np.float64))

    d_means = np.zeros_like(cloud.means)
    d_log_scales = np.zeros_like(cloud.log_scales)
    d_rotations = np.zeros_like(cloud.rotations)
    d_means[cache.idx] = d_means_vis
    d_log_scales[cache.idx] = d_log_scales_vis.astype(dtype)
    d_rotations[cache.idx] = d_rotations_vis.astype(dtype)
    return d_means, d_log_scales, d_rotations
