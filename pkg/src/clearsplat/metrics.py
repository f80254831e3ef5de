"""PSNR and SSIM over full images or masked regions.

SSIM follows the original formulation: grayscale input, 11x11 Gaussian
window (sigma 1.5), K1 = 0.01, K2 = 0.03, dynamic range 1, evaluated at
valid window centers only. A region mask selects which centers count.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

PSNR_CAP_DB = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
GRAY_WEIGHTS = np.array([0.299, 0.587, 0.114])

_HALF = SSIM_WINDOW // 2


class EmptyRegionError(ValueError):
    pass


def _gauss_kernel():
    x = np.arange(SSIM_WINDOW, dtype=np.float64) - _HALF
    k = np.exp(-0.5 * (x / SSIM_SIGMA) ** 2)
    return k / k.sum()


_KERNEL = _gauss_kernel()


def to_gray(img: np.ndarray) -> np.ndarray:
    if img.ndim == 2:
        return np.asarray(img, dtype=np.float64)
    return np.asarray(img, dtype=np.float64) @ GRAY_WEIGHTS


def blur(img: np.ndarray) -> np.ndarray:
    """Separable Gaussian correlation over a full image (constant zero padding)."""
    out = correlate1d(img, _KERNEL, axis=0, mode="constant")
    return correlate1d(out, _KERNEL, axis=1, mode="constant")


def blur_adjoint(d_valid: np.ndarray, full_shape) -> np.ndarray:
    """Adjoint of crop(blur(.)): zero-embed the valid-region gradient, blur back.

    The Gaussian is symmetric so correlation is self-adjoint away from the
    border, and the zero-embedding handles the crop exactly.
    """
    full = np.zeros(full_shape, dtype=np.float64)
    full[_HALF:-_HALF, _HALF:-_HALF] = d_valid
    return blur(full)


def crop_valid(img: np.ndarray) -> np.ndarray:
    return img[_HALF:-_HALF, _HALF:-_HALF]


def psnr(a: np.ndarray, b: np.ndarray, mask: np.ndarray | None = None) -> float:
    """10 log10(1 / MSE) in dB over masked pixels; identical images cap at 99."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    se = (a - b) ** 2
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if not mask.any():
            raise EmptyRegionError("psnr over an empty mask")
        se = se[mask]
    mse = float(se.mean())
    if mse <= 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * np.log10(1.0 / mse))


@dataclass
class SsimStats:
    """Per-valid-center windowed statistics retained for the loss backward."""

    mu_a: np.ndarray
    mu_b: np.ndarray
    e_aa: np.ndarray
    e_bb: np.ndarray
    e_ab: np.ndarray
    gray_a: np.ndarray
    gray_b: np.ndarray

    @property
    def c1(self):
        return SSIM_K1 ** 2

    @property
    def c2(self):
        return SSIM_K2 ** 2


def ssim_stats(a: np.ndarray, b: np.ndarray) -> SsimStats:
    ga, gb = to_gray(a), to_gray(b)
    if ga.shape[0] < SSIM_WINDOW or ga.shape[1] < SSIM_WINDOW:
        raise ValueError(f"image {ga.shape} smaller than the {SSIM_WINDOW}px SSIM window")
    return SsimStats(
        mu_a=crop_valid(blur(ga)),
        mu_b=crop_valid(blur(gb)),
        e_aa=crop_valid(blur(ga * ga)),
        e_bb=crop_valid(blur(gb * gb)),
        e_ab=crop_valid(blur(ga * gb)),
        gray_a=ga,
        gray_b=gb,
    )


def ssim_map(stats: SsimStats) -> np.ndarray:
    """Local SSIM at every valid window center."""
    c1, c2 = stats.c1, stats.c2
    var_a = stats.e_aa - stats.mu_a ** 2
    var_b = stats.e_bb - stats.mu_b ** 2
    cov = stats.e_ab - stats.mu_a * stats.mu_b
    num = (2 * stats.mu_a * stats.mu_b + c1) * (2 * cov + c2)
    den = (stats.mu_a ** 2 + stats.mu_b ** 2 + c1) * (var_a + var_b + c2)
    return num / den


def ssim(a: np.ndarray, b: np.ndarray, mask: np.ndarray | None = None) -> float:
    smap = ssim_map(ssim_stats(a, b))
    if mask is not None:
        mask = crop_valid(np.asarray(mask, dtype=bool))
        if not mask.any():
            raise EmptyRegionError("ssim over an empty mask (after window cropping)")
        smap = smap[mask]
    return float(smap.mean())


@dataclass
class MetricReport:
    psnr: float
    ssim: float
    region: str = "full"


def evaluate_pair(a: np.ndarray, b: np.ndarray, mask: np.ndarray | None = None,
                  region: str = "full") -> MetricReport:
    return MetricReport(psnr=psnr(a, b, mask), ssim=ssim(a, b, mask), region=region)


def obstruction_mask(gt_opacity: np.ndarray, threshold: float = 0.05) -> np.ndarray:
    """Obstruction-influenced region: where the GT opacity map exceeds threshold."""
    return np.asarray(gt_opacity) > threshold
