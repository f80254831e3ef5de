"""Pinhole camera with a rigid world-to-camera transform.

Conventions: x right, y down, z forward (camera looks along +z). Pixel
(ix, iy) covers the continuous square [ix, ix+1) x [iy, iy+1); its center
sits at (ix + 0.5, iy + 0.5). Normalized image coordinates are
u = (ix + 0.5) / width, v = (iy + 0.5) / height.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class Camera:
    """One posed pinhole view."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    world_to_camera: np.ndarray  # (3, 4) rigid [R | t]
    frame_index: int = 0
    near: float = 0.01
    position: np.ndarray = field(init=False)

    def __post_init__(self):
        w2c = np.asarray(self.world_to_camera, dtype=np.float64)
        if w2c.shape != (3, 4):
            raise ValueError(f"world_to_camera must be 3x4, got {w2c.shape}")
        R = w2c[:, :3]
        if np.max(np.abs(R.T @ R - np.eye(3))) > 1e-6:
            raise ValueError("world_to_camera rotation block is not orthonormal")
        self.world_to_camera = w2c
        # camera center in world coordinates: -R^T t
        self.position = -R.T @ w2c[:, 3]

    @property
    def rotation(self) -> np.ndarray:
        return self.world_to_camera[:, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.world_to_camera[:, 3]

    def world_to_cam_points(self, pts: np.ndarray) -> np.ndarray:
        """Map (N, 3) world points into camera coordinates."""
        pts = np.asarray(pts, dtype=np.float64)
        return pts @ self.rotation.T + self.translation

    def cam_to_world_points(self, pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64)
        return (pts - self.translation) @ self.rotation

    def project_points(self, pts_cam: np.ndarray) -> np.ndarray:
        """Project (N, 3) camera-frame points to continuous pixel coords."""
        z = pts_cam[..., 2]
        u = self.fx * pts_cam[..., 0] / z + self.cx
        v = self.fy * pts_cam[..., 1] / z + self.cy
        return np.stack([u, v], axis=-1)

    def backproject_pixels(self, px: np.ndarray, py: np.ndarray,
                           depth: np.ndarray) -> np.ndarray:
        """Lift continuous pixel coords + camera-frame depth to world points."""
        x = (px - self.cx) * depth / self.fx
        y = (py - self.cy) * depth / self.fy
        pts_cam = np.stack([x, y, depth], axis=-1)
        return self.cam_to_world_points(pts_cam)

    def pixel_rays(self) -> tuple[np.ndarray, np.ndarray]:
        """World-space origin and per-pixel unit-z ray directions.

        Returns (origin (3,), dirs (H, W, 3)); dirs have camera-frame z=1,
        so camera depth along a ray equals the ray parameter t.
        """
        iy, ix = np.mgrid[0:self.height, 0:self.width]
        x = (ix + 0.5 - self.cx) / self.fx
        y = (iy + 0.5 - self.cy) / self.fy
        dirs_cam = np.stack([x, y, np.ones_like(x)], axis=-1)
        dirs_world = dirs_cam @ self.rotation
        return self.position.copy(), dirs_world

    def to_dict(self) -> dict:
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "width": self.width, "height": self.height,
            "frame_index": self.frame_index,
            "world_to_camera": self.world_to_camera.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(
            fx=float(d["fx"]), fy=float(d["fy"]),
            cx=float(d["cx"]), cy=float(d["cy"]),
            width=int(d["width"]), height=int(d["height"]),
            world_to_camera=np.asarray(d["world_to_camera"], dtype=np.float64),
            frame_index=int(d.get("frame_index", 0)),
        )


def look_at_w2c(eye: np.ndarray, target: np.ndarray,
                up: np.ndarray = (0.0, -1.0, 0.0)) -> np.ndarray:
    """Build a 3x4 world-to-camera matrix looking from eye toward target.

    `up` is the world direction that should map to the camera's -y
    (y points down in camera coordinates).
    """
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd = fwd / np.linalg.norm(fwd)
    down_hint = -np.asarray(up, dtype=np.float64)
    right = np.cross(down_hint, fwd)
    right = right / np.linalg.norm(right)
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd], axis=0)
    t = -R @ eye
    return np.concatenate([R, t[:, None]], axis=1)
