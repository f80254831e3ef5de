"""Optimization loop: render, compose, backpropagate, adapt the point set.

The ablation ladder is cumulative: baseline renders the scene model alone;
+NOM adds a hash-field obstruction decoded with no gates and summed onto the
render; +AD adds the learned opacity map and premultiplied composition;
+LIM turns on the position-conditioned gates. The obstruction branch stays
frozen for the first `warmup_iters` steps so the scene model claims the
static background before the windshield layers compete for it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .camera import Camera
from .config import RunConfig
from .decomposition import (
    OpacityMap,
    compose,
    compose_backward,
    compose_naive,
    pixel_grid_uv,
    sample_opacity,
    sample_opacity_backward,
)
from .field import HashGridConfig, ObstructionField, obstruction_color, obstruction_color_backward
from .losses import LossBreakdown, opacity_loss, photometric_loss
from .metrics import psnr
from .optim import AdamState, NanGradientError, adam_step
from .splat import GaussianCloud, rasterize, rasterize_backward
from .splat.gaussians import quat_normalize, quat_to_rotmat

CSV_HEADER = "iteration,pho,sky,opacity,total,psnr_train,num_gaussians"


class TrainingDiverged(RuntimeError):
    """Loss went non-finite. Carries the last finite state and the log so far."""

    def __init__(self, message: str, state: "TrainState", rows: list):
        super().__init__(message)
        self.state = state
        self.rows = rows


@dataclass
class TrainState:
    cloud: GaussianCloud
    field: ObstructionField | None
    omap: OpacityMap | None
    config: RunConfig
    scene_extent: float
    iteration: int = 0

    @property
    def level(self) -> int:
        return self.config.level()


@dataclass
class RenderBundle:
    """One frame's forward pass, with enough kept around to run backward."""

    image: np.ndarray            # composed prediction
    transmission: np.ndarray     # scene render I_t
    alpha: np.ndarray
    depth: np.ndarray
    phi: np.ndarray              # (H, W), zeros when no opacity map
    obstruction: np.ndarray      # (H, W, 3), zeros when no field
    raster_cache: object = None
    field_cache: object = None
    phi_cache: object = None


def train_test_split(n_frames: int, every: int) -> tuple[list, list]:
    """Hold out one of every `every` frames (indices 0, every, 2*every, ...)."""
    if every <= 0:
        return list(range(n_frames)), []
    test = [i for i in range(n_frames) if i % every == 0]
    train = [i for i in range(n_frames) if i % every != 0]
    if not train:  # tiny datasets: keep at least one training frame
        train, test = test, []
    return train, test


def scene_extent_from_cameras(cameras: list[Camera]) -> float:
    pos = np.stack([c.position for c in cameras])
    center = pos.mean(axis=0)
    radius = float(np.max(np.linalg.norm(pos - center, axis=1)))
    return max(1.1 * radius, 1.0)


def init_cloud_from_dataset(dataset, config: RunConfig,
                            rng: np.random.Generator) -> GaussianCloud:
    """Backproject a stride grid of GT-depth pixels as the starting point set.

    Stands in for an SfM initialization; falls back to uniform points in the
    camera volume when no depth is stored. Per-point scale matches the world
    spacing of neighboring samples so the first render already covers the
    image.
    """
    stride = 6
    pts, cols, scales = [], [], []
    frames = [f for f in dataset.frames if f.depth is not None]
    for fr in frames[:: max(1, len(frames) // 8)]:
        cam = fr.camera
        iy, ix = np.mgrid[0:cam.height:stride, 0:cam.width:stride]
        px, py = ix.ravel() + 0.5, iy.ravel() + 0.5
        d = fr.depth[iy.ravel(), ix.ravel()]
        ok = np.isfinite(d) & (d > cam.near)
        pts.append(cam.backproject_pixels(px[ok], py[ok], d[ok]))
        cols.append(fr.image[iy.ravel()[ok], ix.ravel()[ok]])
        scales.append(stride * d[ok] / cam.fx)
    if pts:
        pts = np.concatenate(pts)
        cols = np.concatenate(cols)
        scales = np.concatenate(scales)
    else:
        cams = dataset.cameras()
        center = np.stack([c.position for c in cams]).mean(axis=0)
        pts = center + rng.uniform(-1, 1, (config.n_init_points, 3)) * 5.0
        cols = np.full((len(pts), 3), 0.5)
        scales = np.full(len(pts), 0.1)
    if len(pts) > config.n_init_points:
        keep = rng.choice(len(pts), size=config.n_init_points, replace=False)
        keep.sort()
        pts, cols, scales = pts[keep], cols[keep], scales[keep]
    return GaussianCloud.from_points(pts, cols, scales, opacity=0.1, dtype=config.dtype)


def create_state(dataset, config: RunConfig, rng: np.random.Generator) -> TrainState:
    cloud = init_cloud_from_dataset(dataset, config, rng)
    level = config.level()
    fld = omap = None
    if level >= 1:
        cams = dataset.cameras()
        pos = np.stack([c.position for c in cams])
        margin = 0.05 * (pos.max(axis=0) - pos.min(axis=0)) + 1e-3
        grid_cfg = HashGridConfig(
            levels=config.hash_levels, features_per_level=config.hash_features,
            table_size=config.hash_table_size, base_resolution=config.hash_base_res,
            growth=config.hash_growth)
        fld = ObstructionField.create(
            rng, pos.min(axis=0) - margin, pos.max(axis=0) + margin,
            grid_config=grid_cfg, hidden=config.mlp_hidden,
            gated=(level >= 3), dtype=config.dtype)
    if level >= 2:
        omap = OpacityMap.create(config.omap_size, dtype=config.dtype)
    return TrainState(cloud=cloud, field=fld, omap=omap, config=config,
                      scene_extent=scene_extent_from_cameras(dataset.cameras()))


def gather_params(state: TrainState) -> dict:
    params = {
        "gaussians/means": state.cloud.means,
        "gaussians/log_scales": state.cloud.log_scales,
        "gaussians/rotations": state.cloud.rotations,
        "gaussians/opacity_logits": state.cloud.opacity_logits,
        "gaussians/color_logits": state.cloud.color_logits,
    }
    if state.field is not None:
        params.update(state.field.params())
    if state.omap is not None:
        params["phi/logits"] = state.omap.logits
    return params


def learning_rates(state: TrainState, iteration: int) -> dict:
    cfg = state.config
    total = max(cfg.iters, 1)
    decay = cfg.lr_means_final_scale ** (min(iteration, total) / total)
    return {
        "gaussians/means": cfg.lr_means * state.scene_extent * decay,
        "gaussians/log_scales": cfg.lr_scales,
        "gaussians/rotations": cfg.lr_rotations,
        "gaussians/opacity_logits": cfg.lr_opacities,
        "gaussians/color_logits": cfg.lr_colors,
        "hash": cfg.lr_hash,
        "omega": cfg.lr_mlp,
        "beta": cfg.lr_mlp,
        "decoder": cfg.lr_mlp,
        "phi/logits": cfg.lr_phi,
    }


def render_frame(state: TrainState, cam: Camera, with_cache: bool = False,
                 options=None) -> RenderBundle:
    """Forward pass for one camera at the state's ablation level."""
    out, rcache = rasterize(state.cloud, cam, options=options)
    h, w = cam.height, cam.width
    t_img = out.color.astype(np.float64)
    uv = pixel_grid_uv(w, h)

    phi_img = np.zeros((h, w))
    phi_cache = None
    if state.omap is not None:
        res = sample_opacity(uv, state.omap, with_cache=with_cache)
        phi_flat, phi_cache = res if with_cache else (res, None)
        phi_img = phi_flat.astype(np.float64).reshape(h, w)

    o_img = np.zeros((h, w, 3))
    field_cache = None
    if state.field is not None:
        res = obstruction_color(uv, cam.position, state.field, with_cache=with_cache)
        o_flat, field_cache = res if with_cache else (res, None)
        o_img = o_flat.astype(np.float64).reshape(h, w, 3)

    if state.level >= 2:
        image = compose(t_img, o_img, phi_img)
    elif state.level == 1:
        image = compose_naive(t_img, o_img)
    else:
        image = t_img
    return RenderBundle(image=image, transmission=t_img,
                        alpha=out.alpha.astype(np.float64),
                        depth=out.depth.astype(np.float64),
                        phi=phi_img, obstruction=o_img,
                        raster_cache=rcache if with_cache else None,
                        field_cache=field_cache, phi_cache=phi_cache)


@dataclass
class DensifyStats:
    """Positional-gradient bookkeeping between densify events."""

    grad_accum: np.ndarray
    count: np.ndarray

    @classmethod
    def zeros(cls, n: int) -> "DensifyStats":
        return cls(grad_accum=np.zeros(n), count=np.zeros(n, dtype=np.int64))

    def add(self, screen_grads: np.ndarray, visible_rows: np.ndarray,
            width: int, height: int) -> None:
        # NDC x = 2 px / W - 1, so d/dNDC = (W/2) d/dpx
        g = screen_grads[visible_rows].astype(np.float64)
        norm = np.hypot(g[:, 0] * (width / 2.0), g[:, 1] * (height / 2.0))
        np.add.at(self.grad_accum, visible_rows, norm)
        np.add.at(self.count, visible_rows, 1)


def densify_and_prune(cloud: GaussianCloud, stats: DensifyStats, extent: float,
                      config: RunConfig, rng: np.random.Generator):
    """Prune transparent Gaussians, then clone/split high-gradient ones.

    Returns (new_cloud, source_rows) where source_rows[i] names the old row
    behind new row i (-1 for freshly sampled rows) so optimizer moments can
    follow the survivors.
    """
    n = len(cloud.means)
    opac = cloud.opacities()
    keep = opac >= config.eps_prune
    keep_idx = np.flatnonzero(keep)
    pruned = cloud.select(keep_idx)
    score = stats.grad_accum[keep_idx] / np.maximum(stats.count[keep_idx], 1)
    seen = stats.count[keep_idx] > 0

    hot = (score > config.tau_grad) & seen
    scale_max = np.exp(pruned.log_scales.astype(np.float64)).max(axis=1)
    split = hot & (scale_max > config.split_scale_frac * extent)
    clone = hot & ~split

    growth = int(clone.sum()) + int(split.sum())  # net +1 per event
    if n + growth > config.max_gaussians:
        split[:] = False
        clone[:] = False

    survivors = np.flatnonzero(~split)
    parts = [pruned.select(survivors)]
    sources = [keep_idx[survivors]]

    if np.any(clone):
        rows = np.flatnonzero(clone)
        parts.append(pruned.select(rows))
        sources.append(np.full(len(rows), -1, dtype=np.int64))

    if np.any(split):
        rows = np.flatnonzero(split)
        parent = pruned.select(rows)
        children = []
        for _ in range(2):
            child = parent.copy()
            R = quat_to_rotmat(quat_normalize(parent.rotations.astype(np.float64)))
            S = np.exp(parent.log_scales.astype(np.float64))
            z = rng.standard_normal((len(rows), 3))
            offset = np.einsum("nij,nj->ni", R, S * z)
            child.means = (parent.means.astype(np.float64) + offset).astype(cloud.dtype)
            child.log_scales = (parent.log_scales.astype(np.float64)
                                - math.log(1.6)).astype(cloud.dtype)
            children.append(child)
        for child in children:
            parts.append(child)
            sources.append(np.full(len(rows), -1, dtype=np.int64))

    merged = parts[0]
    for p in parts[1:]:
        merged = GaussianCloud.concatenate(merged, p)
    return merged, np.concatenate(sources)


def _fmt_row(it, bd: LossBreakdown, psnr_val: float, n_gauss: int) -> str:
    return (f"{it},{bd.pho:.8g},{bd.sky:.8g},{bd.opacity:.8g},"
            f"{bd.total:.8g},{psnr_val:.6g},{n_gauss}")


def evaluate_split(state: TrainState, dataset, indices, targets=None) -> tuple:
    """Mean losses and PSNR of the composed prediction over given frames."""
    cfg = state.config
    phos, psnrs = [], []
    op_val = 0.0
    if state.omap is not None:
        op_val, _ = opacity_loss(state.omap, dataset.width, dataset.height)
    for j in indices:
        fr = dataset.frames[j]
        target = targets[j] if targets is not None else fr.image
        bundle = render_frame(state, fr.camera)
        pho, _ = photometric_loss(bundle.image, target)
        phos.append(pho)
        psnrs.append(psnr(np.clip(bundle.image, 0.0, 1.0), np.clip(target, 0.0, 1.0)))
    bd = LossBreakdown(pho=float(np.mean(phos)), sky=0.0, opacity=op_val,
                       lambda_sky=cfg.lambda_sky, lambda_opacity=cfg.lambda_opacity)
    return bd, float(np.mean(psnrs))


def loss_and_gradients(state: TrainState, cam: Camera, target: np.ndarray,
                       branch_live: bool = True, options=None):
    """One frame's loss terms and the gradient of the total w.r.t. every
    live parameter group.

    Returns (breakdown, grads, screen, bundle); grads and screen come back
    None when the loss is non-finite (no backward pass is attempted), and
    `branch_live=False` freezes the obstruction branch (warmup): its groups
    are left out of the gradient dict entirely. `options` overrides the
    rasterizer thresholds (the backward pass replays whatever the forward
    cache recorded, so both sides always agree).
    """
    cfg = state.config
    h, w = cam.height, cam.width
    bundle = render_frame(state, cam, with_cache=True, options=options)
    pho, d_img = photometric_loss(bundle.image, target)
    op_val, op_grad = (opacity_loss(state.omap, w, h)
                       if state.omap is not None else (0.0, None))
    bd = LossBreakdown(pho=pho, sky=0.0, opacity=op_val,
                       lambda_sky=cfg.lambda_sky, lambda_opacity=cfg.lambda_opacity)
    if not np.isfinite(bd.total):
        return bd, None, None, bundle

    if state.level >= 2:
        d_t, d_o, d_phi = compose_backward(bundle.transmission, bundle.phi, d_img)
    elif state.level == 1:
        d_t, d_o, d_phi = d_img, d_img, None
    else:
        d_t, d_o, d_phi = d_img, None, None

    grads_cloud, screen = rasterize_backward(
        state.cloud, cam, bundle.raster_cache, d_t, with_screen_grads=True)
    grads = {
        "gaussians/means": grads_cloud.means,
        "gaussians/log_scales": grads_cloud.log_scales,
        "gaussians/rotations": grads_cloud.rotations,
        "gaussians/opacity_logits": grads_cloud.opacity_logits,
        "gaussians/color_logits": grads_cloud.color_logits,
    }

    if branch_live and state.field is not None:
        fg = obstruction_color_backward(state.field, bundle.field_cache,
                                        d_o.reshape(-1, 3).astype(state.field.dtype))
        fgd = fg.as_dict()
        if not state.field.gated:  # gate MLPs unused: no reason to step them
            fgd = {k: v for k, v in fgd.items()
                   if not (k.startswith("omega/") or k.startswith("beta/"))}
        grads.update(fgd)
    if branch_live and state.omap is not None:
        d_logits = cfg.lambda_opacity * op_grad
        if d_phi is not None:
            d_logits = d_logits + sample_opacity_backward(
                state.omap, bundle.phi_cache, d_phi.ravel())
        grads["phi/logits"] = d_logits.astype(state.omap.logits.dtype)
    return bd, grads, screen, bundle


def train(dataset, config: RunConfig, initial_state: TrainState | None = None,
          targets: dict | None = None, seed: int | None = None,
          checkpoint_cb=None) -> tuple[TrainState, list]:
    """Optimize over the training split; returns (state, CSV rows).

    `targets` optionally remaps frame index -> target image (stage-2 training
    uses recovered transmissions). Deterministic for a fixed seed. Raises
    TrainingDiverged (carrying partial state/rows) if the loss goes NaN.
    """
    if len(dataset.frames) < 2:
        raise ValueError("training needs at least 2 posed frames")
    rng = np.random.Generator(np.random.PCG64(config.seed if seed is None else seed))
    state = initial_state or create_state(dataset, config, rng)
    cfg = config
    h, w = dataset.height, dataset.width
    train_idx, test_idx = train_test_split(len(dataset.frames), cfg.test_every)

    params = gather_params(state)
    adam = AdamState.create(params)
    stats = DensifyStats.zeros(len(state.cloud.means))
    densify_until = int(cfg.densify_until_frac * cfg.iters)

    rows = [CSV_HEADER]
    order: list = []
    for it in range(1, cfg.iters + 1):
        if not order:
            order = list(rng.permutation(train_idx))
        j = int(order.pop())
        fr = dataset.frames[j]
        target = targets[j] if targets is not None else fr.image

        bd, grads, screen, bundle = loss_and_gradients(
            state, fr.camera, target, branch_live=it > cfg.warmup_iters)
        if grads is None:
            raise TrainingDiverged(f"loss went non-finite at iteration {it}", state, rows)

        try:
            adam_step(params, grads, adam, learning_rates(state, it))
        except NanGradientError as exc:
            raise TrainingDiverged(str(exc), state, rows) from exc
        state.cloud.normalize_rotations()

        stats.add(screen, bundle.raster_cache.proj.idx, w, h)

        if (cfg.densify_from <= it <= densify_until
                and it % cfg.densify_every == 0 and it != cfg.iters):
            state.cloud, source_rows = densify_and_prune(
                state.cloud, stats, state.scene_extent, cfg, rng)
            for key in list(adam.m):
                if key.startswith("gaussians/"):
                    adam.remap_rows(key, source_rows)
            stats = DensifyStats.zeros(len(state.cloud.means))
            params = gather_params(state)

        state.iteration = it
        train_psnr = psnr(np.clip(bundle.image, 0.0, 1.0), np.clip(target, 0.0, 1.0))
        rows.append(_fmt_row(it, bd, train_psnr, len(state.cloud.means)))

        if checkpoint_cb is not None and cfg.checkpoint_every > 0 \
                and it % cfg.checkpoint_every == 0:
            checkpoint_cb(state, it)

    if test_idx:
        bd_test, psnr_test = evaluate_split(state, dataset, test_idx, targets)
        rows.append(_fmt_row("final", bd_test, psnr_test, len(state.cloud.means)))
    return state, rows
