"""Per-pixel front-to-back alpha compositing of projected Gaussians.

Splats are depth-sorted (ties broken by source index so renders are
bit-deterministic) and composited per pixel:

    c(p) = sum_i c_i a_i prod_{j<i} (1 - a_j) + bg * prod_i (1 - a_i)

with a_i = opacity_i * exp(-0.5 d^T C^-1 d) clamped to 0.99. Contributors
below the alpha threshold are skipped and blending stops once the pixel's
transmittance falls under the termination threshold. The backward pass
replays the same traversal, reconstructing each contributor's
transmittance and suffix sums, and is exact for the thresholds used in
the forward pass.

Kernels are serial (deterministic accumulation order); images are small
enough that this is fast.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from numba import njit

from ..camera import Camera
from .gaussians import GaussianCloud, GaussianGrads, sigmoid
from .project import ProjectionCache, project_gaussians, project_gaussians_backward

ALPHA_MAX = 0.99
DEPTH_ALPHA_FLOOR = 1e-6


@dataclass(frozen=True)
class RasterizeOptions:
    """Thresholds for the compositing loop.

    The default bounding radius (in units of the splat's largest screen-space
    std-dev) is matched to the alpha threshold: beyond ~3.33 sigma a
    contribution is below 1/255 for any base opacity, so the box never cuts
    a contribution the skip would have kept.
    """

    alpha_skip: float = 1.0 / 255.0
    term_transmittance: float = 1e-4
    radius_sigma: float = 3.33

    @classmethod
    def exact(cls) -> "RasterizeOptions":
        """No skips, no early termination, wide boxes: the oracle-comparable mode."""
        return cls(alpha_skip=0.0, term_transmittance=0.0, radius_sigma=6.0)


@dataclass
class RenderOutput:
    color: np.ndarray      # (H, W, 3), background composited in
    alpha: np.ndarray      # (H, W) accumulated opacity
    depth: np.ndarray      # (H, W) alpha-weighted expected depth
    n_contrib: np.ndarray  # (H, W) int32 contributor count


@dataclass
class RenderCache:
    """Forward-pass state retained for the backward replay."""

    proj: ProjectionCache
    order: np.ndarray      # sort permutation over the projection arrays
    mean2d: np.ndarray     # sorted, (M, 2)
    icov: np.ndarray       # sorted packed inverse cov (a, b, c), (M, 3)
    opacity: np.ndarray    # sorted base opacities, (M,)
    color: np.ndarray      # sorted colors, (M, 3)
    depth: np.ndarray      # sorted camera depths, (M,)
    background: np.ndarray
    options: RasterizeOptions
    final_color: np.ndarray
    final_T: np.ndarray
    depth_acc: np.ndarray
    hit_pix: np.ndarray    # flat pixel ids of surviving contributions
    hit_g: np.ndarray      # matching Gaussian falloff values exp(-q/2)
    hit_count: np.ndarray  # contributions per sorted splat, (M,)


@njit(cache=True)
def _forward_kernel(mean2d, icov, opacity, color, depth, radius, bg,
                    alpha_skip, term_T, out_color, out_T, out_depth_acc,
                    out_ncontrib, hit_pix, hit_g, hit_count):
    """Composite splats and record every surviving (pixel, falloff) pair.

    hit_pix / hit_g are filled in traversal order, hit_count[s] per splat,
    so the backward pass can replay the exact survivor set sequentially
    without rescanning bounding boxes or re-evaluating the exponential.
    """
    H, W = out_T.shape
    M = mean2d.shape[0]
    k = 0
    for s in range(M):
        mx = mean2d[s, 0]
        my = mean2d[s, 1]
        r = radius[s]
        x0 = int(np.floor(mx - r))
        x1 = int(np.ceil(mx + r))
        y0 = int(np.floor(my - r))
        y1 = int(np.ceil(my + r))
        if x0 < 0:
            x0 = 0
        if y0 < 0:
            y0 = 0
        if x1 > W - 1:
            x1 = W - 1
        if y1 > H - 1:
            y1 = H - 1
        if x0 > x1 or y0 > y1:
            continue
        a = icov[s, 0]
        b = icov[s, 1]
        c = icov[s, 2]
        op = opacity[s]
        # conservative ellipse cut: alpha < alpha_skip whenever q exceeds
        # 2 ln(op / alpha_skip); the slack keeps the exact per-pixel test
        # authoritative so rounding can never flip a skip decision
        if alpha_skip > 0.0:
            if op < alpha_skip:
                continue
            q_cut = 2.0 * np.log(op / alpha_skip) + 1e-3
        else:
            q_cut = np.inf
        c0 = color[s, 0]
        c1 = color[s, 1]
        c2 = color[s, 2]
        dep = depth[s]
        for iy in range(y0, y1 + 1):
            dy = iy + 0.5 - my
            for ix in range(x0, x1 + 1):
                T = out_T[iy, ix]
                if T < term_T:
                    continue
                dx = ix + 0.5 - mx
                q = a * dx * dx + 2.0 * b * dx * dy + c * dy * dy
                if q > q_cut:
                    continue
                g = np.exp(-0.5 * q)
                alpha = op * g
                if alpha > ALPHA_MAX:
                    alpha = ALPHA_MAX
                if alpha < alpha_skip:
                    continue
                w = alpha * T
                out_color[iy, ix, 0] += w * c0
                out_color[iy, ix, 1] += w * c1
                out_color[iy, ix, 2] += w * c2
                out_depth_acc[iy, ix] += w * dep
                out_T[iy, ix] = T * (1.0 - alpha)
                out_ncontrib[iy, ix] += 1
                hit_pix[k] = iy * W + ix
                hit_g[k] = g
                hit_count[s] += 1
                k += 1
    for iy in range(H):
        for ix in range(W):
            T = out_T[iy, ix]
            out_color[iy, ix, 0] += T * bg[0]
            out_color[iy, ix, 1] += T * bg[1]
            out_color[iy, ix, 2] += T * bg[2]
    return k


# column layout of the packed per-pixel backward state; one row per pixel
# keeps every survivor's reads and writes inside a single cache line
_BW_RUN_T = 0
_BW_PC = 1          # prefix color, 3 columns
_BW_PD = 4          # prefix depth
_BW_FC = 5          # final color, 3 columns
_BW_FT = 8          # final transmittance
_BW_FD = 9          # final depth accumulator
_BW_DC = 10         # dL/dcolor, 3 columns
_BW_DD = 13         # dL/ddepth_acc
_BW_DT = 14         # dL/dT_end
_BW_COLS = 16


@njit(cache=True)
def _backward_kernel(mean2d, icov, opacity, color, depth,
                     hit_pix, hit_g, hit_count, W, px,
                     g_mean2d, g_q, g_opacity, g_color, g_depth):
    """Replay of the forward traversal accumulating per-splat gradients.

    Walks the recorded survivor list in forward order (no box rescans, no
    exponentials). px is the packed per-pixel state table (running
    transmittance and prefix sums get advanced in place); g_q collects
    dL/d(quadratic form) weighted outer products (dx^2, dx*dy, dy^2),
    converted to cov2d gradients by the caller.
    """
    M = mean2d.shape[0]
    k = 0
    for s in range(M):
        n_hits = hit_count[s]
        if n_hits == 0:
            continue
        mx = mean2d[s, 0]
        my = mean2d[s, 1]
        a = icov[s, 0]
        b = icov[s, 1]
        c = icov[s, 2]
        op = opacity[s]
        c0 = color[s, 0]
        c1 = color[s, 1]
        c2 = color[s, 2]
        dep = depth[s]
        for _ in range(n_hits):
            pix = hit_pix[k]
            g = hit_g[k]
            k += 1
            T = px[pix, _BW_RUN_T]
            alpha = op * g
            capped = False
            if alpha > ALPHA_MAX:
                alpha = ALPHA_MAX
                capped = True
            w = alpha * T
            one_minus = 1.0 - alpha
            inv_om = 1.0 / one_minus

            # advance prefix state first so suffix = final - prefix
            pc0 = px[pix, _BW_PC] + w * c0
            pc1 = px[pix, _BW_PC + 1] + w * c1
            pc2 = px[pix, _BW_PC + 2] + w * c2
            pd = px[pix, _BW_PD] + w * dep
            px[pix, _BW_PC] = pc0
            px[pix, _BW_PC + 1] = pc1
            px[pix, _BW_PC + 2] = pc2
            px[pix, _BW_PD] = pd
            px[pix, _BW_RUN_T] = T * one_minus

            dc0 = px[pix, _BW_DC]
            dc1 = px[pix, _BW_DC + 1]
            dc2 = px[pix, _BW_DC + 2]
            dd = px[pix, _BW_DD]

            # direct color / depth parameter gradients
            g_color[s, 0] += w * dc0
            g_color[s, 1] += w * dc1
            g_color[s, 2] += w * dc2
            g_depth[s] += w * dd

            # d(loss)/d(alpha) via color suffixes, depth suffix, T_end
            suf0 = px[pix, _BW_FC] - pc0
            suf1 = px[pix, _BW_FC + 1] - pc1
            suf2 = px[pix, _BW_FC + 2] - pc2
            sufd = px[pix, _BW_FD] - pd
            dalpha = (
                dc0 * (c0 * T - suf0 * inv_om)
                + dc1 * (c1 * T - suf1 * inv_om)
                + dc2 * (c2 * T - suf2 * inv_om)
            )
            dalpha += dd * (dep * T - sufd * inv_om)
            # T_end = prod (1 - alpha_k): dT_end/dalpha_i = -T_end/(1-alpha_i)
            dalpha += px[pix, _BW_DT] * (-px[pix, _BW_FT] * inv_om)

            if not capped:
                iy = pix // W
                ix = pix - iy * W
                dx = ix + 0.5 - mx
                dy = iy + 0.5 - my
                g_opacity[s] += g * dalpha
                glq = dalpha * op * g * (-0.5)
                ddx = glq * (2.0 * a * dx + 2.0 * b * dy)
                ddy = glq * (2.0 * b * dx + 2.0 * c * dy)
                g_mean2d[s, 0] -= ddx
                g_mean2d[s, 1] -= ddy
                g_q[s, 0] += glq * dx * dx
                g_q[s, 1] += glq * dx * dy
                g_q[s, 2] += glq * dy * dy


def _pack_inverse_cov2d(cov2d: np.ndarray) -> np.ndarray:
    a = cov2d[:, 0, 0]
    b = cov2d[:, 0, 1]
    c = cov2d[:, 1, 1]
    det = a * c - b * b
    return np.stack([c / det, -b / det, a / det], axis=1)


def _pixel_radius(cov2d: np.ndarray, radius_sigma: float, limit: int) -> np.ndarray:
    a = cov2d[:, 0, 0]
    b = cov2d[:, 0, 1]
    c = cov2d[:, 1, 1]
    mid = 0.5 * (a + c)
    disc = np.sqrt(np.maximum(0.25 * (a - c) ** 2 + b * b, 0.0))
    lam_max = mid + disc
    r = np.ceil(radius_sigma * np.sqrt(lam_max) + 1.0)
    return np.minimum(r, limit).astype(np.int32)


def rasterize(cloud: GaussianCloud, cam: Camera, background=None,
              options: RasterizeOptions | None = None) -> tuple[RenderOutput, RenderCache]:
    """Render the cloud from `cam`. Returns the image and the backward cache."""
    options = options or RasterizeOptions()
    dtype = cloud.dtype
    if background is None:
        background = np.zeros(3, dtype=dtype)
    background = np.ascontiguousarray(background, dtype=dtype)

    proj = project_gaussians(cloud, cam)
    order = np.lexsort((proj.idx, proj.depth))

    mean2d = np.ascontiguousarray(proj.mean2d[order])
    cov2d = proj.cov2d[order]
    icov = np.ascontiguousarray(_pack_inverse_cov2d(cov2d))
    opacity = np.ascontiguousarray(sigmoid(cloud.opacity_logits[proj.idx][order]))
    color = np.ascontiguousarray(sigmoid(cloud.color_logits[proj.idx][order]))
    depth = np.ascontiguousarray(proj.depth[order])
    radius = _pixel_radius(cov2d, options.radius_sigma, max(cam.width, cam.height))

    H, W = cam.height, cam.width
    out_color = np.zeros((H, W, 3), dtype=dtype)
    out_T = np.ones((H, W), dtype=dtype)
    depth_acc = np.zeros((H, W), dtype=dtype)
    n_contrib = np.zeros((H, W), dtype=np.int32)

    # survivor-list capacity: sum of clipped bounding boxes, mirroring the
    # kernel's clipping exactly (an over-count, never an under-count)
    x0 = np.maximum(np.floor(mean2d[:, 0] - radius), 0.0)
    x1 = np.minimum(np.ceil(mean2d[:, 0] + radius), W - 1.0)
    y0 = np.maximum(np.floor(mean2d[:, 1] - radius), 0.0)
    y1 = np.minimum(np.ceil(mean2d[:, 1] + radius), H - 1.0)
    areas = np.maximum(x1 - x0 + 1.0, 0.0) * np.maximum(y1 - y0 + 1.0, 0.0)
    bound = int(areas.sum())
    hit_pix = np.empty(bound, dtype=np.int64)
    hit_g = np.empty(bound, dtype=dtype)
    hit_count = np.zeros(len(mean2d), dtype=np.int64)

    k = _forward_kernel(mean2d, icov, opacity, color, depth, radius, background,
                        dtype.type(options.alpha_skip),
                        dtype.type(options.term_transmittance),
                        out_color, out_T, depth_acc, n_contrib,
                        hit_pix, hit_g, hit_count)

    alpha = 1.0 - out_T
    depth_map = depth_acc / np.maximum(alpha, dtype.type(DEPTH_ALPHA_FLOOR))
    output = RenderOutput(color=out_color, alpha=alpha, depth=depth_map,
                          n_contrib=n_contrib)
    cache = RenderCache(proj=proj, order=order, mean2d=mean2d, icov=icov,
                        opacity=opacity, color=color, depth=depth,
                        background=background, options=options,
                        final_color=out_color, final_T=out_T, depth_acc=depth_acc,
                        hit_pix=hit_pix[:k], hit_g=hit_g[:k], hit_count=hit_count)
    return output, cache


def rasterize_backward(cloud: GaussianCloud, cam: Camera, cache: RenderCache,
                       dL_dcolor: np.ndarray,
                       dL_dalpha: np.ndarray | None = None,
                       dL_ddepth: np.ndarray | None = None,
                       with_screen_grads: bool = False):
    """Analytic gradients of the render w.r.t. every Gaussian parameter.

    Parameters that contributed to no pixel receive exactly zero gradient.
    With `with_screen_grads` the return is (grads, d_mean2d) where d_mean2d
    is the per-Gaussian screen-space positional gradient in pixels — the
    statistic densification thresholds on — zeros for culled Gaussians.
    """
    dtype = cloud.dtype
    H, W = cache.final_T.shape
    dL_dcolor = np.ascontiguousarray(dL_dcolor, dtype=dtype)
    if dL_dalpha is None:
        dL_dalpha = np.zeros((H, W), dtype=dtype)
    else:
        dL_dalpha = dL_dalpha.astype(dtype, copy=True)
    if dL_ddepth is None:
        dL_ddepth_acc = np.zeros((H, W), dtype=dtype)
    else:
        # depth_map = depth_acc / max(alpha, floor); fold the quotient rule
        # into the alpha gradient wherever the floor is inactive
        alpha = 1.0 - cache.final_T
        A = np.maximum(alpha, dtype.type(DEPTH_ALPHA_FLOOR))
        dL_ddepth_acc = (dL_ddepth / A).astype(dtype)
        active = alpha > DEPTH_ALPHA_FLOOR
        dL_dalpha = dL_dalpha + np.where(
            active, -cache.depth_acc / (A * A) * dL_ddepth, 0.0).astype(dtype)

    # alpha = 1 - T_end; the background's bg*T_end term is already part of
    # final_color, so it is covered by the color suffix sums in the kernel
    dL_dTend = (-dL_dalpha).astype(dtype)

    M = len(cache.mean2d)
    g_mean2d = np.zeros((M, 2), dtype=dtype)
    g_q = np.zeros((M, 3), dtype=dtype)
    g_opacity = np.zeros(M, dtype=dtype)
    g_color = np.zeros((M, 3), dtype=dtype)
    g_depth = np.zeros(M, dtype=dtype)

    px = np.zeros((H * W, _BW_COLS), dtype=dtype)
    px[:, _BW_RUN_T] = 1.0
    px[:, _BW_FC:_BW_FC + 3] = cache.final_color.reshape(-1, 3)
    px[:, _BW_FT] = cache.final_T.reshape(-1)
    px[:, _BW_FD] = cache.depth_acc.reshape(-1)
    px[:, _BW_DC:_BW_DC + 3] = dL_dcolor.reshape(-1, 3)
    px[:, _BW_DD] = dL_ddepth_acc.reshape(-1)
    px[:, _BW_DT] = dL_dTend.reshape(-1)

    _backward_kernel(cache.mean2d, cache.icov, cache.opacity, cache.color,
                     cache.depth,
                     cache.hit_pix, cache.hit_g, cache.hit_count, W, px,
                     g_mean2d, g_q, g_opacity, g_color, g_depth)

    # quadratic-form gradients -> cov2d gradients: dC = -A Q A, A = C^-1
    a, b, c = cache.icov[:, 0], cache.icov[:, 1], cache.icov[:, 2]
    A = np.empty((M, 2, 2), dtype=dtype)
    A[:, 0, 0] = a
    A[:, 0, 1] = b
    A[:, 1, 0] = b
    A[:, 1, 1] = c
    Q = np.empty((M, 2, 2), dtype=dtype)
    Q[:, 0, 0] = g_q[:, 0]
    Q[:, 0, 1] = g_q[:, 1]
    Q[:, 1, 0] = g_q[:, 1]
    Q[:, 1, 1] = g_q[:, 2]
    d_cov2d_sorted = -(A @ Q @ A)

    # undo the depth sort back to projection-cache order
    inv = cache.order
    M_total = len(cache.proj.idx)
    d_mean2d = np.zeros((M_total, 2), dtype=dtype)
    d_cov2d = np.zeros((M_total, 2, 2), dtype=dtype)
    d_depth = np.zeros(M_total, dtype=dtype)
    d_opacity_s = np.zeros(M_total, dtype=dtype)
    d_color_s = np.zeros((M_total, 3), dtype=dtype)
    d_mean2d[inv] = g_mean2d
    d_cov2d[inv] = d_cov2d_sorted
    d_depth[inv] = g_depth
    d_opacity_s[inv] = g_opacity
    d_color_s[inv] = g_color

    d_means, d_log_scales, d_rotations = project_gaussians_backward(
        cloud, cam, cache.proj, d_mean2d, d_cov2d, d_depth)

    grads = GaussianGrads.zeros_like(cloud)
    grads.means = d_means
    grads.log_scales = d_log_scales
    grads.rotations = d_rotations

    # sigmoid chain for opacity / color logits
    op_vis = sigmoid(cloud.opacity_logits[cache.proj.idx])
    col_vis = sigmoid(cloud.color_logits[cache.proj.idx])
    grads.opacity_logits[cache.proj.idx] = d_opacity_s * op_vis * (1.0 - op_vis)
    grads.color_logits[cache.proj.idx] = d_color_s * col_vis * (1.0 - col_vis)
    if with_screen_grads:
        screen = np.zeros((len(cloud.means), 2), dtype=dtype)
        screen[cache.proj.idx] = d_mean2d
        return grads, screen
    return grads


def rasterize_reference(cloud: GaussianCloud, cam: Camera, background=None,
                        apply_thresholds: bool = False) -> RenderOutput:
    """Naive direct evaluation of the blending sum over the full image.

    Every splat is evaluated at every pixel (no bounding boxes, and no
    skips or early termination unless `apply_thresholds`). Kept free of
    the kernel code path so it can serve as the compositing oracle.
    """
    dtype = np.float64
    if background is None:
        background = np.zeros(3)
    background = np.asarray(background, dtype=dtype)

    proj = project_gaussians(cloud.astype(dtype), cam)
    order = np.lexsort((proj.idx, proj.depth))

    H, W = cam.height, cam.width
    iy, ix = np.mgrid[0:H, 0:W]
    px = ix + 0.5
    py = iy + 0.5

    color = np.zeros((H, W, 3), dtype=dtype)
    depth_acc = np.zeros((H, W), dtype=dtype)
    T = np.ones((H, W), dtype=dtype)
    n_contrib = np.zeros((H, W), dtype=np.int32)

    opac = sigmoid(cloud.opacity_logits.astype(dtype))
    cols = sigmoid(cloud.color_logits.astype(dtype))

    for k in order:
        src = proj.idx[k]
        inv = np.linalg.inv(proj.cov2d[k])
        dx = px - proj.mean2d[k, 0]
        dy = py - proj.mean2d[k, 1]
        q = inv[0, 0] * dx * dx + 2 * inv[0, 1] * dx * dy + inv[1, 1] * dy * dy
        alpha = np.minimum(opac[src] * np.exp(-0.5 * q), ALPHA_MAX)
        use = np.ones((H, W), dtype=bool)
        if apply_thresholds:
            use &= alpha >= 1.0 / 255.0
            use &= T >= 1e-4
        w = np.where(use, alpha * T, 0.0)
        color += w[..., None] * cols[src]
        depth_acc += w * proj.depth[k]
        T = np.where(use, T * (1.0 - alpha), T)
        n_contrib += use.astype(np.int32)

    color += T[..., None] * background
    alpha_map = 1.0 - T
    depth_map = depth_acc / np.maximum(alpha_map, DEPTH_ALPHA_FLOOR)
    return RenderOutput(color=color, alpha=alpha_map, depth=depth_map,
                        n_contrib=n_contrib)
