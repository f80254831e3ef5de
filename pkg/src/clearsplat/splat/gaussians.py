"""3D Gaussian primitives: parameter storage, covariance factorization.

Parameters are stored structure-of-arrays. Raw (pre-activation) values are
kept so the optimizer sees an unconstrained space: scales as logs,
opacity/color as logits, rotations as quaternions normalized after every
optimizer step.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class DegenerateCovarianceError(ValueError):
    """Covariance is singular or numerically unusable."""


def sigmoid(x):
    x = np.asarray(x)
    out = np.empty_like(x, dtype=x.dtype if x.dtype.kind == "f" else np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def inverse_sigmoid(y):
    y = np.asarray(y)
    return np.log(y / (1.0 - y))


def quat_normalize(q: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(norm == 0):
        raise ValueError("zero quaternion")
    return q / norm


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Unit quaternions (..., 4) wxyz to rotation matrices (..., 3, 3)."""
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3), dtype=q.dtype)
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def quat_to_rotmat_backward(q_unit: np.ndarray, dR: np.ndarray) -> np.ndarray:
    """Gradient of quat_to_rotmat w.r.t. the UNIT quaternion.

    q_unit: (..., 4), dR: (..., 3, 3). Returns (..., 4).
    """
    w, x, y, z = q_unit[..., 0], q_unit[..., 1], q_unit[..., 2], q_unit[..., 3]
    g = np.zeros_like(q_unit)
    # dR entries, differentiated entry by entry (factor 2 everywhere)
    g[..., 0] = 2 * (
        -z * dR[..., 0, 1] + y * dR[..., 0, 2]
        + z * dR[..., 1, 0] - x * dR[..., 1, 2]
        - y * dR[..., 2, 0] + x * dR[..., 2, 1]
    )
    g[..., 1] = 2 * (
        y * dR[..., 0, 1] + z * dR[..., 0, 2]
        + y * dR[..., 1, 0] - 2 * x * dR[..., 1, 1] - w * dR[..., 1, 2]
        + z * dR[..., 2, 0] + w * dR[..., 2, 1] - 2 * x * dR[..., 2, 2]
    )
    g[..., 2] = 2 * (
        -2 * y * dR[..., 0, 0] + x * dR[..., 0, 1] + w * dR[..., 0, 2]
        + x * dR[..., 1, 0] + z * dR[..., 1, 2]
        - w * dR[..., 2, 0] + z * dR[..., 2, 1] - 2 * y * dR[..., 2, 2]
    )
    g[..., 3] = 2 * (
        -2 * z * dR[..., 0, 0] - w * dR[..., 0, 1] + x * dR[..., 0, 2]
        + w * dR[..., 1, 0] - 2 * z * dR[..., 1, 1] + y * dR[..., 1, 2]
        + x * dR[..., 2, 0] + y * dR[..., 2, 1]
    )
    return g


def quat_normalize_backward(q_raw: np.ndarray, dq_unit: np.ndarray) -> np.ndarray:
    """Backprop through q_unit = q_raw / ||q_raw||."""
    norm = np.linalg.norm(q_raw, axis=-1, keepdims=True)
    q_unit = q_raw / norm
    inner = np.sum(q_unit * dq_unit, axis=-1, keepdims=True)
    return (dq_unit - q_unit * inner) / norm


def build_covariance(log_scale: np.ndarray, rotation: np.ndarray) -> np.ndarray:
    """Sigma = R S S^T R^T with S = diag(exp(log_scale)).

    Accepts single parameters (3,), (4,) or batches (N, 3), (N, 4);
    the quaternion is normalized internally.
    """
    log_scale = np.asarray(log_scale, dtype=np.float64)
    rotation = np.asarray(rotation, dtype=np.float64)
    q = quat_normalize(rotation)
    R = quat_to_rotmat(q)
    s = np.exp(log_scale)
    M = R * s[..., None, :]  # R @ diag(s)
    return M @ np.swapaxes(M, -1, -2)


def build_covariance_backward(log_scale: np.ndarray, rotation: np.ndarray,
                              dSigma: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of build_covariance w.r.t. log_scale and the raw quaternion."""
    q = quat_normalize(rotation)
    R = quat_to_rotmat(q)
    s = np.exp(log_scale)
    M = R * s[..., None, :]
    dM = (dSigma + np.swapaxes(dSigma, -1, -2)) @ M
    dR = dM * s[..., None, :]
    ds = np.sum(R * dM, axis=-2)
    dlog_scale = ds * s
    dq_unit = quat_to_rotmat_backward(q, dR)
    drot = quat_normalize_backward(rotation, dq_unit)
    return dlog_scale, drot


def eval_gaussian(x: np.ndarray, mean: np.ndarray, cov: np.ndarray) -> float:
    """Unnormalized Gaussian kernel exp(-0.5 (x-mu)^T Sigma^-1 (x-mu))."""
    x = np.asarray(x, dtype=np.float64)
    mean = np.asarray(mean, dtype=np.float64)
    cov = np.asarray(cov, dtype=np.float64)
    if np.linalg.cond(cov) > 1e12:
        raise DegenerateCovarianceError(
            f"covariance condition number {np.linalg.cond(cov):.3e} exceeds 1e12")
    d = x - mean
    expo = -0.5 * d @ np.linalg.solve(cov, d)
    return float(np.exp(expo))


@dataclass
class GaussianCloud:
    """Structure-of-arrays container for N splatting primitives."""

    means: np.ndarray          # (N, 3) world
    log_scales: np.ndarray     # (N, 3)
    rotations: np.ndarray      # (N, 4) wxyz, kept unit-norm
    opacity_logits: np.ndarray  # (N,)
    color_logits: np.ndarray   # (N, 3)

    PARAM_NAMES = ("means", "log_scales", "rotations", "opacity_logits", "color_logits")

    def __post_init__(self):
        n = len(self.means)
        assert self.log_scales.shape == (n, 3)
        assert self.rotations.shape == (n, 4)
        assert self.opacity_logits.shape == (n,)
        assert self.color_logits.shape == (n, 3)

    def __len__(self) -> int:
        return len(self.means)

    @property
    def dtype(self):
        return self.means.dtype

    def opacities(self) -> np.ndarray:
        return sigmoid(self.opacity_logits)

    def colors(self) -> np.ndarray:
        return sigmoid(self.color_logits)

    def covariances(self) -> np.ndarray:
        return build_covariance(self.log_scales, self.rotations).astype(self.dtype)

    def normalize_rotations(self) -> None:
        self.rotations = quat_normalize(self.rotations)

    def astype(self, dtype) -> "GaussianCloud":
        return GaussianCloud(*(getattr(self, n).astype(dtype) for n in self.PARAM_NAMES))

    def copy(self) -> "GaussianCloud":
        return GaussianCloud(*(getattr(self, n).copy() for n in self.PARAM_NAMES))

    def select(self, idx) -> "GaussianCloud":
        return GaussianCloud(*(getattr(self, n)[idx] for n in self.PARAM_NAMES))

    @classmethod
    def concatenate(cls, a: "GaussianCloud", b: "GaussianCloud") -> "GaussianCloud":
        return cls(*(np.concatenate([getattr(a, n), getattr(b, n)])
                     for n in cls.PARAM_NAMES))

    @classmethod
    def from_points(cls, points: np.ndarray, colors: np.ndarray,
                    scale: np.ndarray | float, opacity: float = 0.1,
                    dtype=np.float32) -> "GaussianCloud":
        """Isotropic Gaussians at given points with given RGB colors."""
        n = len(points)
        scale = np.broadcast_to(np.asarray(scale, dtype=np.float64), (n,))
        log_scales = np.repeat(np.log(scale)[:, None], 3, axis=1)
        rotations = np.zeros((n, 4))
        rotations[:, 0] = 1.0
        colors = np.clip(colors, 1e-3, 1 - 1e-3)
        return cls(
            means=np.asarray(points, dtype=dtype).copy(),
            log_scales=log_scales.astype(dtype),
            rotations=rotations.astype(dtype),
            opacity_logits=np.full(n, inverse_sigmoid(opacity), dtype=dtype),
            color_logits=inverse_sigmoid(colors).astype(dtype),
        )


@dataclass
class GaussianGrads:
    """Per-parameter gradients mirroring GaussianCloud's arrays."""

    means: np.ndarray
    log_scales: np.ndarray
    rotations: np.ndarray
    opacity_logits: np.ndarray
    color_logits: np.ndarray

    @classmethod
    def zeros_like(cls, cloud: GaussianCloud) -> "GaussianGrads":
        return cls(*(np.zeros_like(getattr(cloud, n))
                     for n in GaussianCloud.PARAM_NAMES))
