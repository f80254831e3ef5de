"""Training objective: photometric (L1 + SSIM) term plus the opacity and
sky regularizers, each with a hand-written backward pass.

total = L_pho + lambda1 * L_sky + lambda2 * L_opacity
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .decomposition import OpacityMap, sample_opacity, sample_opacity_backward, pixel_grid_uv
from .metrics import GRAY_WEIGHTS, blur_adjoint, crop_valid, ssim_map, ssim_stats

SSIM_WEIGHT = 0.2  # 3DGS-standard mix: 0.8 L1 + 0.2 (1 - SSIM)
DEFAULT_LAMBDA_SKY = 0.001
DEFAULT_LAMBDA_OPACITY = 0.001


@dataclass
class LossBreakdown:
    pho: float
    sky: float
    opacity: float
    lambda_sky: float = DEFAULT_LAMBDA_SKY
    lambda_opacity: float = DEFAULT_LAMBDA_OPACITY

    @property
    def total(self) -> float:
        return self.pho + self.lambda_sky * self.sky + self.lambda_opacity * self.opacity


def _ssim_mean_backward(stats, d_mean: float) -> np.ndarray:
    """Gradient of mean(ssim_map) w.r.t. the first (rendered) image."""
    c1, c2 = stats.c1, stats.c2
    mu_a, mu_b = stats.mu_a, stats.mu_b
    var_a = stats.e_aa - mu_a ** 2
    var_b = stats.e_bb - mu_b ** 2
    cov = stats.e_ab - mu_a * mu_b
    a1 = 2 * mu_a * mu_b + c1
    a2 = 2 * cov + c2
    b1 = mu_a ** 2 + mu_b ** 2 + c1
    b2 = var_a + var_b + c2
    s = (a1 * a2) / (b1 * b2)

    u = np.full_like(s, d_mean / s.size)
    d_a1 = u * a2 / (b1 * b2)
    d_a2 = u * a1 / (b1 * b2)
    d_b1 = -u * s / b1
    d_b2 = -u * s / b2

    d_mu_a = d_a1 * 2 * mu_b - d_a2 * 2 * mu_b + d_b1 * 2 * mu_a - d_b2 * 2 * mu_a
    d_e_ab = d_a2 * 2
    d_e_aa = d_b2

    ga, gb = stats.gray_a, stats.gray_b
    d_ga = (blur_adjoint(d_mu_a, ga.shape)
            + blur_adjoint(d_e_ab, ga.shape) * gb
            + blur_adjoint(d_e_aa, ga.shape) * 2 * ga)
    return d_ga


def photometric_loss(render: np.ndarray, target: np.ndarray):
    """0.8 L1 + 0.2 (1 - SSIM); returns (value, d_render)."""
    if render.shape != target.shape:
        raise ValueError(f"shape mismatch {render.shape} vs {target.shape}")
    render = np.asarray(render, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)

    diff = render - target
    l1 = float(np.abs(diff).mean())
    d_render = np.sign(diff) * ((1.0 - SSIM_WEIGHT) / diff.size)

    stats = ssim_stats(render, target)
    s = float(ssim_map(stats).mean())
    # d(0.2 * (1 - s))/d s = -0.2
    d_gray = _ssim_mean_backward(stats, -SSIM_WEIGHT)
    d_render = d_render + d_gray[..., None] * GRAY_WEIGHTS

    value = (1.0 - SSIM_WEIGHT) * l1 + SSIM_WEIGHT * (1.0 - s)
    return value, d_render


def opacity_loss(omap: OpacityMap, width: int, height: int):
    """Mean |phi| over the render pixel grid; returns (value, d_logits)."""
    uv = pixel_grid_uv(width, height)
    phi, cache = sample_opacity(uv, omap, with_cache=True)
    value = float(np.abs(phi).mean())  # phi > 0 so |phi| = phi
    d_logits = sample_opacity_backward(omap, cache, np.full(len(phi), 1.0 / len(phi)))
    return value, d_logits


def sky_loss(alpha: np.ndarray, sky_mask: np.ndarray | None):
    """Mean accumulated alpha over sky pixels; (0, zeros) without a mask."""
    if sky_mask is None:
        return 0.0, np.zeros_like(alpha)
    sky_mask = np.asarray(sky_mask, dtype=bool)
    if sky_mask.shape != alpha.shape:
        raise ValueError(f"mask shape {sky_mask.shape} vs alpha {alpha.shape}")
    n = int(sky_mask.sum())
    if n == 0:
        return 0.0, np.zeros_like(alpha)
    value = float(alpha[sky_mask].mean())
    d_alpha = np.where(sky_mask, 1.0 / n, 0.0)
    return value, d_alpha


def total_loss(pho: float, sky: float, opacity: float,
               lambda_sky: float = DEFAULT_LAMBDA_SKY,
               lambda_opacity: float = DEFAULT_LAMBDA_OPACITY) -> LossBreakdown:
    return LossBreakdown(pho=pho, sky=sky, opacity=opacity,
                         lambda_sky=lambda_sky, lambda_opacity=lambda_opacity)
