"""Run configuration: one flat record covering every tunable default.

Configs load from YAML, reject unknown keys (typos must not silently fall
back to defaults), and echo back to YAML verbatim for the run directory.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

import yaml

ABLATION_LEVELS = ("baseline", "nom", "ad", "lim")
DEPTH_SOURCES = ("rendered", "gt")


class ConfigError(Exception):
    pass


@dataclass
class RunConfig:
    # dataset generation
    seed: int = 0
    frames: int = 30
    width: int = 128
    height: int = 128
    speed: float = 0.35
    turn_deg: float = 10.0
    gain_cycles: float = 2.0
    obstruction_free: bool = False

    # model structure
    ablation: str = "lim"          # baseline | nom | ad | lim (cumulative)
    g3e: bool = False              # run the geometry-guided second stage
    tau: float = 0.5               # recovery threshold on phi
    depth_source: str = "gt"       # gt | rendered (stand-in for external MVS)
    omap_size: int = 64
    hash_levels: int = 8
    hash_features: int = 2
    hash_table_size: int = 16384
    hash_base_res: int = 16
    hash_growth: float = 1.5
    mlp_hidden: int = 32

    # optimization
    iters: int = 3000
    g3e_iters: int = 0             # 0 -> same as iters
    precision: str = "float32"     # training dtype; tests drive f64 directly
    lambda_sky: float = 0.001
    lambda_opacity: float = 0.001
    lr_means: float = 1.6e-4       # scaled by scene extent, decays exponentially
    lr_means_final_scale: float = 0.01
    lr_scales: float = 5e-3
    lr_rotations: float = 1e-3
    lr_opacities: float = 5e-2
    lr_colors: float = 2.5e-3
    lr_hash: float = 1e-2
    lr_mlp: float = 1e-3
    lr_phi: float = 5e-2
    warmup_iters: int = 200

    # densification
    densify_from: int = 200
    densify_every: int = 100
    densify_until_frac: float = 0.7
    tau_grad: float = 2e-4         # mean NDC positional-gradient norm
    eps_prune: float = 5e-3
    split_scale_frac: float = 0.01  # of scene extent
    n_init_points: int = 4000
    max_gaussians: int = 60000

    # geometry stage
    eps_px: float = 1.0
    eps_rel: float = 0.01
    min_support: int = 2
    seed_stride: int = 4
    max_seed_points: int = 8000
    g3e_cold_start: bool = False   # reset obstruction branch before stage 2

    # harness
    test_every: int = 8            # hold out one of every k frames
    checkpoint_every: int = 0      # 0 -> final checkpoint only

    def __post_init__(self):
        if self.ablation not in ABLATION_LEVELS:
            raise ConfigError(f"ablation must be one of {ABLATION_LEVELS}, got {self.ablation!r}")
        if self.depth_source not in DEPTH_SOURCES:
            raise ConfigError(f"depth_source must be one of {DEPTH_SOURCES}, got {self.depth_source!r}")
        if not 0.0 < self.tau < 1.0:
            raise ConfigError(f"tau must lie in (0, 1), got {self.tau}")
        if self.precision not in ("float32", "float64"):
            raise ConfigError(f"precision must be float32 or float64, got {self.precision!r}")
        if self.iters < 1:
            raise ConfigError(f"iters must be positive, got {self.iters}")
        if self.frames < 2:
            raise ConfigError(f"frames must be at least 2, got {self.frames}")

    @property
    def dtype(self):
        import numpy as np
        return np.float32 if self.precision == "float32" else np.float64

    def level(self) -> int:
        """Ablation ladder position: 0 baseline, 1 +NOM, 2 +AD, 3 +LIM."""
        return ABLATION_LEVELS.index(self.ablation)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**d)

    def replace(self, **kw) -> "RunConfig":
        return dataclasses.replace(self, **kw)


def load_config(path) -> RunConfig:
    p = Path(path)
    try:
        raw = yaml.safe_load(p.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {p}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse config {p}: {exc}") from exc
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"config {p} must be a mapping, got {type(raw).__name__}")
    return RunConfig.from_dict(raw)


def save_config(config: RunConfig, path) -> None:
    Path(path).write_text(yaml.safe_dump(config.to_dict(), sort_keys=False))
