"""Learned windshield opacity map and the image composition / recovery steps.

The captured image is modeled as I = (1 - phi) * I_t + O, with phi a
single shared 2D opacity field sampled bilinearly from a learnable logit
grid and O the premultiplied obstruction. Recovery inverts the blend
where the windshield is see-through (phi < tau) and falls back to the
rendered transmission elsewhere.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .splat.gaussians import sigmoid

OPACITY_LOGIT_INIT = -6.0  # phi ~ 0.0025: start fully transmissive
RECOVERY_DENOM_FLOOR = 1e-3


def pixel_grid_uv(width: int, height: int) -> np.ndarray:
    """(H*W, 2) image coordinates at pixel centers, u along x, in [0,1]."""
    iy, ix = np.mgrid[0:height, 0:width]
    u = (ix + 0.5) / width
    v = (iy + 0.5) / height
    return np.stack([u.ravel(), v.ravel()], axis=1)


@dataclass
class OpacityMap:
    logits: np.ndarray  # (H_phi, W_phi) learnable

    @classmethod
    def create(cls, size: int = 64, dtype=np.float32) -> "OpacityMap":
        return cls(logits=np.full((size, size), OPACITY_LOGIT_INIT, dtype=dtype))

    def astype(self, dtype) -> "OpacityMap":
        return OpacityMap(self.logits.astype(dtype))


@dataclass
class OpacitySampleCache:
    rows: np.ndarray     # (B, 4) flat logit indices
    weights: np.ndarray  # (B, 4) bilinear weights
    phi: np.ndarray      # (B,) sampled values


def sample_opacity(uv: np.ndarray, omap: OpacityMap, with_cache: bool = False):
    """Bilinear logit interpolation then sigmoid; vertices sit on grid entries."""
    h, w = omap.logits.shape
    uv = np.clip(np.atleast_2d(uv), 0.0, 1.0)
    x = uv[:, 0] * (w - 1)
    y = uv[:, 1] * (h - 1)
    i0 = np.minimum(np.floor(x), w - 2).astype(np.int64) if w > 1 else np.zeros(len(x), np.int64)
    j0 = np.minimum(np.floor(y), h - 2).astype(np.int64) if h > 1 else np.zeros(len(y), np.int64)
    fx = x - i0
    fy = y - j0
    rows = np.stack([j0 * w + i0, j0 * w + i0 + 1,
                     (j0 + 1) * w + i0, (j0 + 1) * w + i0 + 1], axis=1)
    weights = np.stack([(1 - fx) * (1 - fy), fx * (1 - fy),
                        (1 - fx) * fy, fx * fy], axis=1)
    logit = (omap.logits.ravel()[rows] * weights).sum(axis=1)
    phi = sigmoid(logit)
    if with_cache:
        return phi, OpacitySampleCache(rows=rows, weights=weights, phi=phi)
    return phi


def sample_opacity_backward(omap: OpacityMap, cache: OpacitySampleCache,
                            d_phi: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. the logit grid (deterministic scatter)."""
    d_logit = d_phi * cache.phi * (1.0 - cache.phi)
    grad = np.zeros_like(omap.logits).ravel()
    np.add.at(grad, cache.rows.ravel(), (cache.weights * d_logit[:, None]).ravel())
    return grad.reshape(omap.logits.shape)


def sample_opacity_image(omap: OpacityMap, width: int, height: int,
                         with_cache: bool = False):
    """phi sampled at every pixel center, shaped (H, W)."""
    res = sample_opacity(pixel_grid_uv(width, height), omap, with_cache=with_cache)
    if with_cache:
        phi, cache = res
        return phi.reshape(height, width), cache
    return res.reshape(height, width)


def compose(transmission: np.ndarray, obstruction: np.ndarray,
            phi: np.ndarray) -> np.ndarray:
    """I = (1 - phi) * I_t + O with premultiplied obstruction O."""
    if transmission.shape != obstruction.shape:
        raise ValueError(f"shape mismatch {transmission.shape} vs {obstruction.shape}")
    if phi.shape != transmission.shape[:2]:
        raise ValueError(f"phi shape {phi.shape} vs image {transmission.shape}")
    return (1.0 - phi)[..., None] * transmission + obstruction


def compose_backward(transmission: np.ndarray, phi: np.ndarray, d_img: np.ndarray):
    """Returns (d_transmission, d_obstruction, d_phi)."""
    d_t = (1.0 - phi)[..., None] * d_img
    d_o = d_img
    d_phi = -(d_img * transmission).sum(axis=-1)
    return d_t, d_o, d_phi


def compose_naive(transmission: np.ndarray, obstruction: np.ndarray,
                  phi1: float = 1.0, phi2: float = 1.0) -> np.ndarray:
    """Fixed-weight linear blend I = phi1 * I_t + phi2 * I_o (ablation baseline)."""
    return phi1 * transmission + phi2 * obstruction


def recover_transmission(captured: np.ndarray, obstruction: np.ndarray,
                         phi: np.ndarray, transmission_rendered: np.ndarray,
                         tau: float = 0.5) -> np.ndarray:
    """Invert the blend where see-through, use the render where occluded.

    I_hat = (I - O) / (1 - phi) where phi < tau, else the rendered
    transmission; clamped to [0,1].
    """
    if not 0.0 < tau < 1.0:
        raise ValueError(f"tau must be in (0,1), got {tau}")
    denom = np.maximum(1.0 - phi, RECOVERY_DENOM_FLOOR)[..., None]
    inverted = (captured - obstruction) / denom
    see_through = (phi < tau)[..., None]
    return np.clip(np.where(see_through, inverted, transmission_rendered), 0.0, 1.0)
