"""Multi-view depth consistency filtering and geometry-seeded retraining.

Stage-1 training leaves the scene model weakest exactly where the
obstruction sat, so the second stage (1) strips the estimated obstruction
from every frame, (2) cross-checks per-view depth maps against each
other, (3) backprojects the surviving pixels into a dense seed cloud, and
(4) retrains from the union of stage-1 Gaussians and seeds against the
recovered images. Depth can come from the renderer itself or from the
dataset's stored maps (the stand-in for an external MVS).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace as dc_replace

import numpy as np

from .camera import Camera
from .decomposition import recover_transmission
from .splat.gaussians import GaussianCloud
from .training import TrainState, render_frame, train


def reproject(px: np.ndarray, py: np.ndarray, depth: np.ndarray,
              cam_src: Camera, cam_dst: Camera):
    """Carry continuous pixel coords + depth from one view into another.

    Returns (px_dst, py_dst, depth_dst, visible); `visible` is False where
    the point lands behind the destination near plane or outside its
    image bounds.
    """
    px = np.asarray(px, dtype=np.float64)
    py = np.asarray(py, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    world = cam_src.backproject_pixels(px, py, depth)
    pts_dst = cam_dst.world_to_cam_points(world)
    z = pts_dst[..., 2]
    in_front = z > cam_dst.near
    z_safe = np.where(in_front, z, 1.0)
    qx = cam_dst.fx * pts_dst[..., 0] / z_safe + cam_dst.cx
    qy = cam_dst.fy * pts_dst[..., 1] / z_safe + cam_dst.cy
    visible = (in_front
               & (qx >= 0.0) & (qx <= cam_dst.width)
               & (qy >= 0.0) & (qy <= cam_dst.height))
    return qx, qy, z, visible


@dataclass
class ConsistencyMask:
    """Per-view consistency verdicts with the supporting-view counts."""

    mask: np.ndarray     # (H, W) bool
    support: np.ndarray  # (H, W) int32


def _valid_depth(depth: np.ndarray, cam: Camera) -> np.ndarray:
    return np.isfinite(depth) & (depth > cam.near)


def _read_depth_bilinear(depth: np.ndarray, cam: Camera,
                         qx: np.ndarray, qy: np.ndarray):
    """Interpolated depth at continuous coords, clamped to the border ring.

    Returns (sample_x, sample_y, value, all_four_valid). Bilinear rather
    than nearest so smooth slanted surfaces (road at grazing angle)
    round-trip cleanly; only genuine discontinuities mix surfaces and get
    rejected downstream.
    """
    H, W = depth.shape
    sx = np.clip(qx, 0.5, W - 0.5)
    sy = np.clip(qy, 0.5, H - 0.5)
    x0 = np.clip(np.floor(sx - 0.5).astype(np.int64), 0, max(W - 2, 0))
    y0 = np.clip(np.floor(sy - 0.5).astype(np.int64), 0, max(H - 2, 0))
    fx = sx - 0.5 - x0
    fy = sy - 0.5 - y0
    d00 = depth[y0, x0]
    d10 = depth[y0, np.minimum(x0 + 1, W - 1)]
    d01 = depth[np.minimum(y0 + 1, H - 1), x0]
    d11 = depth[np.minimum(y0 + 1, H - 1), np.minimum(x0 + 1, W - 1)]
    ok = (_valid_depth(d00, cam) & _valid_depth(d10, cam)
          & _valid_depth(d01, cam) & _valid_depth(d11, cam))
    val = ((1 - fx) * (1 - fy) * d00 + fx * (1 - fy) * d10
           + (1 - fx) * fy * d01 + fx * fy * d11)
    return sx, sy, val, ok


def consistency_filter(depths: list, cams: list, eps_px: float = 1.0,
                       eps_rel: float = 0.01, min_support: int = 2) -> list:
    """Cross-view agreement masks M_j over per-view depth maps.

    A pixel of view j is supported by view k when its reprojection into k
    reads a depth there that reprojects back onto the original pixel
    within `eps_px` and onto the original depth within `eps_rel`
    (relative). Pixels with at least `min_support` supporting views (j
    itself never counts) are masked true. Invalid depths (non-finite or
    behind the near plane) are masked false and never lend support.
    """
    n = len(depths)
    if n != len(cams):
        raise ValueError(f"{n} depth maps vs {len(cams)} cameras")
    out = []
    for j in range(n):
        cam_j = cams[j]
        H, W = depths[j].shape
        iy, ix = np.mgrid[0:H, 0:W]
        px = (ix + 0.5).ravel()
        py = (iy + 0.5).ravel()
        d_j = depths[j].ravel()
        valid = _valid_depth(depths[j], cam_j).ravel()
        support = np.zeros(H * W, dtype=np.int32)
        for k in range(n):
            if k == j:
                continue
            cam_k = cams[k]
            qx, qy, zk, _ = reproject(px[valid], py[valid], d_j[valid],
                                      cam_j, cam_k)
            # a landing within half a pixel of the border still has a
            # nearest sample; the round trip below is the real gate
            vis = ((zk > cam_k.near)
                   & (qx >= -0.5) & (qx <= cam_k.width + 0.5)
                   & (qy >= -0.5) & (qy <= cam_k.height + 0.5))
            sx, sy, d_k, read_ok = _read_depth_bilinear(depths[k], cam_k, qx, qy)
            ok = vis & read_ok
            # carry k's surface estimate back: must land on the original
            # pixel at the original depth
            with np.errstate(invalid="ignore"):
                rx, ry, rd, _ = reproject(sx, sy, d_k, cam_k, cam_j)
                err_px = np.hypot(rx - px[valid], ry - py[valid])
                err_rel = np.abs(rd - d_j[valid]) / d_j[valid]
                agrees = (ok & (rd > cam_j.near)
                          & (err_px <= eps_px) & (err_rel < eps_rel))
            support[valid] += agrees.astype(np.int32)
        mask = valid & (support >= min_support)
        out.append(ConsistencyMask(mask=mask.reshape(H, W),
                                   support=support.reshape(H, W)))
    return out


@dataclass
class SeedCloud:
    """World points with source colors, ready to become Gaussians."""

    points: np.ndarray   # (N, 3)
    colors: np.ndarray   # (N, 3)
    scales: np.ndarray   # (N,) world-space spacing of neighboring seeds

    def __len__(self) -> int:
        return len(self.points)

    @classmethod
    def empty(cls) -> "SeedCloud":
        return cls(points=np.zeros((0, 3)), colors=np.zeros((0, 3)),
                   scales=np.zeros(0))

    @classmethod
    def concatenate(cls, clouds: list) -> "SeedCloud":
        clouds = [c for c in clouds if len(c)]
        if not clouds:
            return cls.empty()
        return cls(points=np.concatenate([c.points for c in clouds]),
                   colors=np.concatenate([c.colors for c in clouds]),
                   scales=np.concatenate([c.scales for c in clouds]))


def backproject_masked(depth: np.ndarray, mask: np.ndarray, image: np.ndarray,
                       cam: Camera, stride: int = 4) -> SeedCloud:
    """Lift every stride-th masked pixel to a colored world point."""
    if depth.shape != mask.shape or image.shape[:2] != depth.shape:
        raise ValueError("depth, mask, and image shapes disagree")
    iy, ix = np.mgrid[0:depth.shape[0]:stride, 0:depth.shape[1]:stride]
    iy, ix = iy.ravel(), ix.ravel()
    keep = mask[iy, ix] & _valid_depth(depth[iy, ix], cam)
    iy, ix = iy[keep], ix[keep]
    d = depth[iy, ix].astype(np.float64)
    pts = cam.backproject_pixels(ix + 0.5, iy + 0.5, d)
    return SeedCloud(points=pts,
                     colors=np.clip(image[iy, ix].astype(np.float64), 0.0, 1.0),
                     scales=stride * d / cam.fx)


def g3e_pipeline(stage1: TrainState, dataset, config=None,
                 seed: int | None = None):
    """Geometry-guided second training stage.

    Renders the stage-1 decomposition, recovers per-frame transmission
    targets, filters depth maps across views, seeds new Gaussians from
    the surviving pixels, and retrains the union against the recovered
    targets. Returns (stage-2 state, metric rows). With an empty seed
    cloud the retraining proceeds from the stage-1 Gaussians alone.
    """
    cfg = config or stage1.config
    cams = dataset.cameras()

    targets: dict = {}
    depths, depth_cams = [], []
    for j, fr in enumerate(dataset.frames):
        bundle = render_frame(stage1, fr.camera)
        targets[j] = recover_transmission(fr.image, bundle.obstruction,
                                          bundle.phi, bundle.transmission,
                                          cfg.tau)
        if cfg.depth_source == "gt" and fr.depth is not None:
            depths.append(fr.depth.astype(np.float64))
        else:
            # expected depth is meaningless where nothing was hit
            d = np.where(bundle.alpha > 0.5, bundle.depth, np.nan)
            depths.append(d)
        depth_cams.append(fr.camera)

    masks = consistency_filter(depths, depth_cams, eps_px=cfg.eps_px,
                               eps_rel=cfg.eps_rel, min_support=cfg.min_support)
    seeds = SeedCloud.concatenate([
        backproject_masked(depths[j], masks[j].mask, targets[j],
                           depth_cams[j], stride=cfg.seed_stride)
        for j in range(len(dataset.frames))
    ])

    rng = np.random.Generator(np.random.PCG64(
        (cfg.seed if seed is None else seed) + 7919))
    if len(seeds) > cfg.max_seed_points:
        keep = rng.choice(len(seeds), size=cfg.max_seed_points, replace=False)
        keep.sort()
        seeds = SeedCloud(points=seeds.points[keep], colors=seeds.colors[keep],
                          scales=seeds.scales[keep])

    if len(seeds) == 0:
        warnings.warn("geometry filter produced no seed points; "
                      "retraining from stage-1 Gaussians alone")
        cloud = stage1.cloud
    else:
        seed_cloud = GaussianCloud.from_points(
            seeds.points, seeds.colors, seeds.scales, opacity=0.1,
            dtype=stage1.cloud.dtype)
        cloud = GaussianCloud.concatenate(stage1.cloud, seed_cloud)

    stage2_cfg = cfg if cfg.g3e_iters == 0 else dc_replace(cfg, iters=cfg.g3e_iters)
    field, omap = stage1.field, stage1.omap
    if cfg.g3e_cold_start and (field is not None or omap is not None):
        from .training import create_state  # fresh branch, same structure
        fresh = create_state(dataset, stage2_cfg, rng)
        field, omap = fresh.field, fresh.omap
    state2 = TrainState(cloud=cloud, field=field, omap=omap,
                        config=stage2_cfg, scene_extent=stage1.scene_extent)
    return train(dataset, stage2_cfg, initial_state=state2, targets=targets,
                 seed=(cfg.seed if seed is None else seed) + 104729)
