"""Synthetic corrupted-capture sequences with full ground truth.

A procedural corridor scene (road plane, building walls, far wall) is
ray-cast analytically per camera, so ground-truth transmission and depth
never pass through the splatting renderer. A static windshield layer —
an opaque holder blob, a semi-transparent stain, and a transparent
reflection gradient — is composed on top per frame:

    I_j = (1 - phi*) * T_j + phi* * g_j * B

with the illumination gain g_j applied to the reflection-class region only.
g_j is a pure function of camera position (arc length along the path), so
revisiting a position reproduces the gain. All GT layers are snapped onto
the 8-bit PNG lattice *before* composition; recomposing stored layers
therefore reproduces I_j bit-exactly, in memory and after a disk roundtrip.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .camera import Camera, look_at_w2c
from .dataio import (
    DatasetError,
    load_color_png,
    load_gray_png,
    load_pfm,
    load_png_u8,
    quantize_gray,
    quantize_srgb,
    save_color_png,
    save_gray_png,
    save_pfm,
    save_png_u8,
)
from .decomposition import compose

REGION_CLEAR = 0
REGION_HOLDER = 1
REGION_STAIN = 2
REGION_REFLECTION = 3

PLANE_GROUND = 0
PLANE_LEFT = 1
PLANE_RIGHT = 2
PLANE_BACK = 3


# --- procedural value noise ---------------------------------------------------

_HASH_X = np.uint64(0x9E3779B97F4A7C15)
_HASH_Y = np.uint64(0xC2B2AE3D27D4EB4F)
_HASH_SEED = np.uint64(0xD6E8FEB86659FD93)


def _lattice_hash(ix: np.ndarray, iy: np.ndarray, seed: int) -> np.ndarray:
    """Integer lattice -> uniform [0,1). splitmix-style avalanche, wraps mod 2^64."""
    with np.errstate(over="ignore"):
        h = (ix.astype(np.int64).astype(np.uint64) * _HASH_X
             ^ iy.astype(np.int64).astype(np.uint64) * _HASH_Y
             ^ np.uint64(seed & 0xFFFFFFFFFFFFFFFF) * _HASH_SEED)
        h ^= h >> np.uint64(33)
        h *= np.uint64(0xFF51AFD7ED558CCD)
        h ^= h >> np.uint64(33)
    return (h >> np.uint64(11)).astype(np.float64) * (1.0 / 2.0**53)


def value_noise(x: np.ndarray, y: np.ndarray, seed: int, octaves: int = 2) -> np.ndarray:
    """Smooth deterministic noise in [0,1]; pure function of (x, y, seed)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    total = np.zeros(np.broadcast(x, y).shape)
    amp_sum = 0.0
    for k in range(octaves):
        freq, amp = 2.0**k, 0.5**k
        xs, ys = x * freq, y * freq
        ix, iy = np.floor(xs), np.floor(ys)
        fx, fy = xs - ix, ys - iy
        # smoothstep keeps the field C1 across cell boundaries
        ux = fx * fx * (3.0 - 2.0 * fx)
        uy = fy * fy * (3.0 - 2.0 * fy)
        s = seed + 101 * k
        v00 = _lattice_hash(ix, iy, s)
        v10 = _lattice_hash(ix + 1, iy, s)
        v01 = _lattice_hash(ix, iy + 1, s)
        v11 = _lattice_hash(ix + 1, iy + 1, s)
        top = v00 * (1 - ux) + v10 * ux
        bot = v01 * (1 - ux) + v11 * ux
        total += amp * (top * (1 - uy) + bot * uy)
        amp_sum += amp
    return total / amp_sum


def noise_rgb(x: np.ndarray, y: np.ndarray, seed: int, octaves: int = 2) -> np.ndarray:
    return np.stack([value_noise(x, y, seed + 31 * c, octaves) for c in range(3)], axis=-1)


# --- scene --------------------------------------------------------------------

@dataclass(frozen=True)
class SceneConfig:
    """Corridor geometry. y points down, so the road sits at positive y."""

    ground_y: float = 1.0
    half_width: float = 3.5
    wall_top: float = -2.5   # y of the top edge of the side walls
    back_z: float = 60.0
    checker_size: float = 1.1


@dataclass
class SyntheticScene:
    """Bounded-plane corridor with procedural textures and analytic depth."""

    seed: int
    config: SceneConfig
    palette: dict = field(default_factory=dict)  # name -> (3,) linear rgb
    noise_seed: int = 0

    @property
    def bbox_min(self) -> np.ndarray:
        c = self.config
        return np.array([-c.half_width, c.wall_top, 0.0])

    @property
    def bbox_max(self) -> np.ndarray:
        c = self.config
        return np.array([c.half_width, c.ground_y, c.back_z])

    # textures are pure functions of world position, so GT is reproducible
    def _ground_color(self, x, z):
        c = self.config
        cell = (np.floor(x / c.checker_size) + np.floor(z / c.checker_size)) % 2
        base = np.where(cell[..., None] > 0.5, self.palette["ground_a"], self.palette["ground_b"])
        mottle = value_noise(x * 0.9, z * 0.9, self.noise_seed + 1)
        return np.clip(base * (0.7 + 0.6 * mottle[..., None]), 0.0, 1.0)

    def _wall_color(self, y, z, side: int):
        stripe = 0.5 + 0.5 * np.cos(z * 2.1 + side * 1.7)
        base = self.palette["wall_a"] if side == 0 else self.palette["wall_b"]
        mottle = value_noise(y * 1.4, z * 0.8, self.noise_seed + 7 + side)
        col = base * (0.55 + 0.45 * mottle[..., None]) + 0.12 * stripe[..., None]
        return np.clip(col, 0.0, 1.0)

    def _back_color(self, x, y):
        c = self.config
        t = np.clip((y - c.wall_top) / (c.ground_y - c.wall_top), 0.0, 1.0)
        base = (1 - t[..., None]) * self.palette["back_a"] + t[..., None] * self.palette["back_b"]
        mottle = value_noise(x * 0.5, y * 0.5, self.noise_seed + 13)
        return np.clip(base * (0.75 + 0.5 * mottle[..., None]), 0.0, 1.0)

    def raycast(self, camera: Camera) -> tuple[np.ndarray, np.ndarray]:
        """Analytic render: (color (H,W,3) linear, depth (H,W) camera-frame z)."""
        c = self.config
        origin, dirs = camera.pixel_rays()
        h, w = dirs.shape[:2]
        t_best = np.full((h, w), np.inf)
        plane_id = np.full((h, w), -1, dtype=np.int8)

        def consider(pid, axis, value, in_bounds):
            nonlocal t_best, plane_id
            with np.errstate(divide="ignore", invalid="ignore"):
                t = (value - origin[axis]) / dirs[..., axis]
            pt = origin[None, None, :] + t[..., None] * dirs
            ok = np.isfinite(t) & (t > camera.near) & (t < t_best) & in_bounds(pt)
            t_best = np.where(ok, t, t_best)
            plane_id = np.where(ok, np.int8(pid), plane_id)

        consider(PLANE_GROUND, 1, c.ground_y,
                 lambda p: (np.abs(p[..., 0]) <= c.half_width) & (p[..., 2] <= c.back_z))
        wall_bounds = lambda p: (p[..., 1] >= c.wall_top) & (p[..., 1] <= c.ground_y) & (p[..., 2] <= c.back_z)
        consider(PLANE_LEFT, 0, -c.half_width, wall_bounds)
        consider(PLANE_RIGHT, 0, c.half_width, wall_bounds)
        consider(PLANE_BACK, 2, c.back_z, lambda p: np.ones(p.shape[:2], dtype=bool))

        # the back wall is a catch-all, but guard against grazing rays anyway
        miss = ~np.isfinite(t_best)
        t_best = np.where(miss, c.back_z, t_best)

        pt = origin[None, None, :] + t_best[..., None] * dirs
        color = np.empty((h, w, 3))
        for pid, fn in ((PLANE_GROUND, lambda m: self._ground_color(pt[m][:, 0], pt[m][:, 2])),
                        (PLANE_LEFT, lambda m: self._wall_color(pt[m][:, 1], pt[m][:, 2], 0)),
                        (PLANE_RIGHT, lambda m: self._wall_color(pt[m][:, 1], pt[m][:, 2], 1)),
                        (PLANE_BACK, lambda m: self._back_color(pt[m][:, 0], pt[m][:, 1]))):
            m = plane_id == pid
            if np.any(m):
                color[m] = fn(m)
        if np.any(miss):
            color[miss] = self.palette["back_a"]
        return color, t_best

    def coverage(self, camera: Camera) -> float:
        """Fraction of pixels hitting scene geometry (back wall is a surface, not sky)."""
        _, depth = self.raycast(camera)
        return float(np.mean(np.isfinite(depth) & (depth > 0)))

    def surface_distance(self, points: np.ndarray) -> np.ndarray:
        """Distance from each point to the nearest scene surface it could lie on."""
        c = self.config
        p = np.asarray(points, dtype=np.float64)
        tol = 1e-6
        inf = np.full(p.shape[0], np.inf)
        d_ground = np.where((np.abs(p[:, 0]) <= c.half_width + tol) & (p[:, 2] <= c.back_z + tol),
                            np.abs(p[:, 1] - c.ground_y), inf)
        wall_ok = (p[:, 1] >= c.wall_top - tol) & (p[:, 1] <= c.ground_y + tol) & (p[:, 2] <= c.back_z + tol)
        d_left = np.where(wall_ok, np.abs(p[:, 0] + c.half_width), inf)
        d_right = np.where(wall_ok, np.abs(p[:, 0] - c.half_width), inf)
        d_back = np.abs(p[:, 2] - c.back_z)
        return np.minimum.reduce([d_ground, d_left, d_right, d_back])

    def describe(self) -> dict:
        return {
            "seed": self.seed,
            "noise_seed": self.noise_seed,
            "config": {
                "ground_y": self.config.ground_y,
                "half_width": self.config.half_width,
                "wall_top": self.config.wall_top,
                "back_z": self.config.back_z,
                "checker_size": self.config.checker_size,
            },
            "palette": {k: list(map(float, v)) for k, v in self.palette.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticScene":
        return cls(
            seed=int(d["seed"]),
            config=SceneConfig(**d["config"]),
            palette={k: np.asarray(v, dtype=np.float64) for k, v in d["palette"].items()},
            noise_seed=int(d["noise_seed"]),
        )


def generate_scene(seed: int, config: SceneConfig | None = None) -> SyntheticScene:
    """Deterministic in seed; seeds vary textures, never the corridor layout."""
    config = config or SceneConfig()
    rng = np.random.Generator(np.random.PCG64(seed))
    palette = {
        "ground_a": rng.uniform(0.18, 0.40, 3),
        "ground_b": rng.uniform(0.45, 0.75, 3),
        "wall_a": rng.uniform(0.35, 0.75, 3),
        "wall_b": rng.uniform(0.35, 0.75, 3),
        "back_a": rng.uniform(0.30, 0.60, 3),
        "back_b": rng.uniform(0.55, 0.90, 3),
    }
    noise_seed = int(rng.integers(0, 2**31))
    return SyntheticScene(seed=seed, config=config, palette=palette, noise_seed=noise_seed)


# --- trajectory ---------------------------------------------------------------

@dataclass(frozen=True)
class TrajectoryConfig:
    width: int = 128
    height: int = 128
    focal_scale: float = 0.9     # fx = fy = focal_scale * width
    speed: float = 0.35          # translation per frame
    turn_deg: float = 0.0        # total heading change over the path
    start: tuple = (0.0, 0.0, 0.0)
    near: float = 0.01


def generate_trajectory(n_frames: int, config: TrajectoryConfig | None = None) -> list[Camera]:
    """Forward-moving cameras; optional monotone turn. Spacing == speed exactly."""
    if n_frames < 2:
        raise ValueError(f"need at least 2 frames, got {n_frames}")
    cfg = config or TrajectoryConfig()
    headings = np.deg2rad(np.linspace(0.0, cfg.turn_deg, n_frames))
    pos = np.zeros((n_frames, 3))
    pos[0] = np.asarray(cfg.start, dtype=np.float64)
    for j in range(1, n_frames):
        step = np.array([np.sin(headings[j - 1]), 0.0, np.cos(headings[j - 1])])
        pos[j] = pos[j - 1] + cfg.speed * step
    fx = cfg.focal_scale * cfg.width
    cams = []
    for j in range(n_frames):
        fwd = np.array([np.sin(headings[j]), 0.0, np.cos(headings[j])])
        w2c = look_at_w2c(pos[j], pos[j] + fwd)
        cams.append(Camera(fx=fx, fy=fx, cx=cfg.width / 2.0, cy=cfg.height / 2.0,
                           width=cfg.width, height=cfg.height,
                           world_to_camera=w2c, frame_index=j, near=cfg.near))
    return cams


def gains_from_positions(positions: np.ndarray, cycles: float = 2.0) -> np.ndarray:
    """g = clamp(0.5 + 0.5 sin(2*pi * s/S * cycles), 0, 1) over arc length s.

    Pure in position: a repeated position adds zero arc length, so it gets
    the same gain.
    """
    pos = np.asarray(positions, dtype=np.float64)
    if pos.ndim != 2 or pos.shape[1] != 3:
        raise ValueError(f"positions must be (N, 3), got {pos.shape}")
    seg = np.linalg.norm(np.diff(pos, axis=0), axis=1)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    total = s[-1] if s[-1] > 0 else 1.0
    return np.clip(0.5 + 0.5 * np.sin(2.0 * np.pi * (s / total) * cycles), 0.0, 1.0)


# --- windshield obstruction ----------------------------------------------------

@dataclass
class ObstructionSpec:
    """Static windshield layer: texture B, opacity phi*, and region classes.

    Regions: 0 clear, 1 opaque holder blob, 2 semi-transparent stain,
    3 transparent reflection gradient. B and phi* are shared by every frame;
    only the reflection gain varies, and only with camera position.
    """

    base: np.ndarray      # (H, W, 3) texture B in camera (u, v) space
    opacity: np.ndarray   # (H, W) phi*
    region: np.ndarray    # (H, W) uint8 class ids
    gain_cycles: float = 2.0

    def gains(self, cameras: list[Camera]) -> np.ndarray:
        positions = np.stack([cam.position for cam in cameras])
        return gains_from_positions(positions, self.gain_cycles)


def _ellipse_mask(u, v, center, radii):
    return ((u - center[0]) / radii[0]) ** 2 + ((v - center[1]) / radii[1]) ** 2


def make_obstruction(seed: int, width: int, height: int,
                     holder_phi: float = 0.97, stain_phi: float = 0.5,
                     reflection_phi: float = 0.15, gain_cycles: float = 2.0,
                     empty: bool = False) -> ObstructionSpec:
    """Default windshield: holder blob, stain patch, reflection band.

    `empty=True` keeps the texture but zeroes phi* — the obstruction-free
    control used to verify the opacity regularizer collapses the map.
    """
    iy, ix = np.mgrid[0:height, 0:width]
    u = (ix + 0.5) / width
    v = (iy + 0.5) / height

    rng = np.random.Generator(np.random.PCG64(seed))
    tex_seed = int(rng.integers(0, 2**31))
    base = 0.25 + 0.7 * noise_rgb(u * 6.0, v * 6.0, tex_seed, octaves=3)
    base = quantize_srgb(np.clip(base, 0.0, 1.0))

    phi = np.zeros((height, width))
    region = np.zeros((height, width), dtype=np.uint8)
    if not empty:
        # reflection: band with a soft gradient, phi ramps to reflection_phi
        band_center = 0.12 + 0.08 * u
        band_d = np.abs(v - band_center) / 0.10
        ref = reflection_phi * np.clip(1.0 - band_d, 0.0, 1.0)
        sel = ref > 0
        phi[sel] = ref[sel]
        region[sel] = REGION_REFLECTION
        # stain: semi-transparent patch, thin smoothstep rim
        q = _ellipse_mask(u, v, (0.25, 0.42), (0.18, 0.12))
        rim = np.clip((1.1 - q) / 0.1, 0.0, 1.0)
        rim = rim * rim * (3.0 - 2.0 * rim)
        sel = q < 1.1
        phi[sel] = stain_phi * rim[sel]
        region[sel & (rim > 0)] = REGION_STAIN
        # holder: near-opaque blob
        q = _ellipse_mask(u, v, (0.72, 0.80), (0.16, 0.13))
        rim = np.clip((1.1 - q) / 0.1, 0.0, 1.0)
        rim = rim * rim * (3.0 - 2.0 * rim)
        sel = q < 1.1
        phi[sel] = holder_phi * rim[sel]
        region[sel & (rim > 0)] = REGION_HOLDER
    phi = quantize_gray(phi)
    region[phi == 0.0] = REGION_CLEAR
    return ObstructionSpec(base=base, opacity=phi, region=region, gain_cycles=gain_cycles)


# --- dataset ------------------------------------------------------------------

@dataclass
class FrameRecord:
    index: int
    camera: Camera
    gain: float
    image: np.ndarray                      # composed capture I_j, linear float
    transmission: np.ndarray | None = None  # GT T_j on the PNG lattice
    obstruction: np.ndarray | None = None   # GT premultiplied O*_j on the lattice
    depth: np.ndarray | None = None         # GT camera-frame depth


@dataclass
class SyntheticDataset:
    frames: list
    opacity: np.ndarray | None = None   # GT phi*, shared by all frames
    region: np.ndarray | None = None
    base: np.ndarray | None = None      # GT windshield texture B
    gain_cycles: float = 2.0
    scene: SyntheticScene | None = None

    @property
    def width(self) -> int:
        return self.frames[0].camera.width

    @property
    def height(self) -> int:
        return self.frames[0].camera.height

    def cameras(self) -> list[Camera]:
        return [f.camera for f in self.frames]


def render_dataset(scene: SyntheticScene, cameras: list[Camera],
                   obstruction: ObstructionSpec,
                   gains: np.ndarray | None = None) -> SyntheticDataset:
    """Ray-cast T_j, compose I_j = (1-phi*) T_j + phi* g_j B, keep every GT layer.

    Layers are quantized to the PNG lattice before composing, so the stored
    layers recompose to I_j exactly. `gains` overrides the position-derived
    gain schedule (used by tests that pin specific gains).
    """
    if gains is None:
        gains = obstruction.gains(cameras)
    gains = np.asarray(gains, dtype=np.float64)
    if gains.shape != (len(cameras),):
        raise ValueError(f"gains shape {gains.shape} != ({len(cameras)},)")
    phi = obstruction.opacity
    base = obstruction.base
    h, w = phi.shape
    gain_sel = (obstruction.region == REGION_REFLECTION)[..., None]
    frames = []
    for j, cam in enumerate(cameras):
        if (cam.height, cam.width) != (h, w):
            raise ValueError(f"camera {j} is {cam.height}x{cam.width}, obstruction is {h}x{w}")
        color, depth = scene.raycast(cam)
        if np.mean(np.isfinite(depth)) < 0.5:
            raise ValueError(f"camera {j} sees under 50% scene coverage")
        t_q = quantize_srgb(color)
        gain_map = np.where(gain_sel, gains[j], 1.0)
        o_q = quantize_srgb(phi[..., None] * gain_map * base)
        image = compose(t_q, o_q, phi)
        frames.append(FrameRecord(index=cam.frame_index, camera=cam, gain=float(gains[j]),
                                  image=image, transmission=t_q, obstruction=o_q, depth=depth))
    return SyntheticDataset(frames=frames, opacity=phi.copy(), region=obstruction.region.copy(),
                            base=base.copy(), gain_cycles=obstruction.gain_cycles, scene=scene)


def make_dataset(seed: int, n_frames: int = 30,
                 scene_config: SceneConfig | None = None,
                 trajectory: TrajectoryConfig | None = None,
                 obstruction_free: bool = False,
                 gain_cycles: float = 2.0) -> SyntheticDataset:
    """One-call benchmark builder; deterministic in (seed, configs)."""
    scene = generate_scene(seed, scene_config)
    traj = trajectory or TrajectoryConfig()
    cams = generate_trajectory(n_frames, traj)
    spec = make_obstruction(seed + 1, traj.width, traj.height,
                            gain_cycles=gain_cycles, empty=obstruction_free)
    return render_dataset(scene, cams, spec)


# --- disk layout ----------------------------------------------------------------

def save_dataset(dataset: SyntheticDataset, out_dir, force: bool = False) -> None:
    """Write frames/%04d.png, gt_* layers, gt_depth/%04d.pfm, cameras.json."""
    out = Path(out_dir)
    if out.exists() and any(out.iterdir()) and not force:
        raise DatasetError(f"output directory {out} is not empty (use force to overwrite)")
    for sub in ("frames", "gt_transmission", "gt_obstruction", "gt_depth"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    for fr in dataset.frames:
        stem = f"{fr.index:04d}"
        save_color_png(out / "frames" / f"{stem}.png", fr.image)
        save_color_png(out / "gt_transmission" / f"{stem}.png", fr.transmission)
        save_color_png(out / "gt_obstruction" / f"{stem}.png", fr.obstruction)
        save_pfm(out / "gt_depth" / f"{stem}.pfm", fr.depth)
    save_gray_png(out / "gt_opacity.png", dataset.opacity)
    if dataset.region is not None:
        save_png_u8(out / "gt_regions.png", dataset.region)
    if dataset.base is not None:
        save_color_png(out / "gt_base.png", dataset.base)
    payload = {
        "gain_cycles": dataset.gain_cycles,
        "frames": [dict(fr.camera.to_dict(), gain=fr.gain) for fr in dataset.frames],
    }
    (out / "cameras.json").write_text(json.dumps(payload, indent=1))
    if dataset.scene is not None:
        (out / "scene.json").write_text(json.dumps(dataset.scene.describe(), indent=1))


def load_dataset(in_dir) -> SyntheticDataset:
    """Inverse of save_dataset. GT layers are optional; frames + cameras are not.

    The loaded composed image comes from frames/%04d.png and so carries one
    extra 8-bit quantization relative to the in-memory composition; the GT
    layers themselves roundtrip exactly.
    """
    root = Path(in_dir)
    cam_path = root / "cameras.json"
    if not cam_path.exists():
        raise DatasetError(f"missing cameras file: {cam_path}")
    try:
        payload = json.loads(cam_path.read_text())
        entries = payload["frames"]
    except (json.JSONDecodeError, KeyError) as exc:
        raise DatasetError(f"malformed cameras file {cam_path}: {exc}") from exc
    if len(entries) < 1:
        raise DatasetError(f"no frames listed in {cam_path}")
    entries = sorted(entries, key=lambda e: int(e["frame_index"]))

    frames = []
    for e in entries:
        cam = Camera.from_dict(e)
        stem = f"{cam.frame_index:04d}"
        image = load_color_png(root / "frames" / f"{stem}.png")
        if image.shape[:2] != (cam.height, cam.width):
            raise DatasetError(f"frame {stem} is {image.shape[:2]}, cameras.json says "
                               f"{(cam.height, cam.width)}")
        t_path = root / "gt_transmission" / f"{stem}.png"
        o_path = root / "gt_obstruction" / f"{stem}.png"
        d_path = root / "gt_depth" / f"{stem}.pfm"
        frames.append(FrameRecord(
            index=cam.frame_index, camera=cam, gain=float(e.get("gain", 1.0)), image=image,
            transmission=load_color_png(t_path) if t_path.exists() else None,
            obstruction=load_color_png(o_path) if o_path.exists() else None,
            depth=load_pfm(d_path) if d_path.exists() else None,
        ))
    opacity_path = root / "gt_opacity.png"
    region_path = root / "gt_regions.png"
    base_path = root / "gt_base.png"
    scene_path = root / "scene.json"
    scene = None
    if scene_path.exists():
        try:
            scene = SyntheticScene.from_dict(json.loads(scene_path.read_text()))
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise DatasetError(f"malformed scene file {scene_path}: {exc}") from exc
    return SyntheticDataset(
        frames=frames,
        opacity=load_gray_png(opacity_path) if opacity_path.exists() else None,
        region=np.asarray(load_png_u8(region_path)) if region_path.exists() else None,
        base=load_color_png(base_path) if base_path.exists() else None,
        gain_cycles=float(payload.get("gain_cycles", 2.0)),
        scene=scene,
    )
