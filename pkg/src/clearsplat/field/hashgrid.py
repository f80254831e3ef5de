"""Multiresolution hash-encoded 2D feature grid.

Each level l stores features on an (N_l+1)x(N_l+1) vertex grid with
N_l = floor(N0 * b^l). Levels whose vertex count fits in the table are
indexed densely (collision-free); finer levels fall back to an XOR hash
into the fixed-size table. Lookups are bilinear and differentiable in
the table entries.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numba import njit

HASH_PRIME_J = np.uint64(2654435761)


@dataclass(frozen=True)
class HashGridConfig:
    levels: int = 8
    features_per_level: int = 2
    table_size: int = 2 ** 14
    base_resolution: int = 16
    growth: float = 1.5

    def __post_init__(self):
        assert self.levels >= 1 and self.features_per_level >= 1
        assert self.table_size & (self.table_size - 1) == 0, "table_size must be a power of two"
        assert self.base_resolution >= 2 and self.growth > 1.0

    def resolution(self, level: int) -> int:
        return int(np.floor(self.base_resolution * self.growth ** level))

    @property
    def feature_dim(self) -> int:
        return self.levels * self.features_per_level


def level_index(cfg: HashGridConfig, level: int, i, j):
    """Table row for integer vertex (i, j) at a level; vectorized over i, j."""
    n = cfg.resolution(level)
    i = np.asarray(i, dtype=np.uint64)
    j = np.asarray(j, dtype=np.uint64)
    if (n + 1) ** 2 <= cfg.table_size:
        return (i * np.uint64(n + 1) + j).astype(np.int64)
    h = np.bitwise_xor(i, j * HASH_PRIME_J)  # uint64 product wraps mod 2^64
    return (h % np.uint64(cfg.table_size)).astype(np.int64)


@dataclass
class HashGridState:
    config: HashGridConfig
    tables: list = field(default_factory=list)  # levels x (table_size, F)

    @classmethod
    def create(cls, cfg: HashGridConfig, rng: np.random.Generator,
               dtype=np.float32) -> "HashGridState":
        tables = [
            rng.uniform(-1e-4, 1e-4, (cfg.table_size, cfg.features_per_level)).astype(dtype)
            for _ in range(cfg.levels)
        ]
        return cls(config=cfg, tables=tables)

    def zeros_like_tables(self) -> list:
        return [np.zeros_like(t) for t in self.tables]


@dataclass
class EncodeCache:
    uv: np.ndarray  # clamped query points; corners are recomputed on replay


@njit(cache=True)
def _corner_rows(n, tsize, i0, j0):
    """Rows for the four cell corners of (i0, j0) at resolution n."""
    if (n + 1) * (n + 1) <= tsize:
        r00 = np.int64(i0 * (n + 1) + j0)
        r10 = np.int64((i0 + 1) * (n + 1) + j0)
        r01 = np.int64(i0 * (n + 1) + j0 + 1)
        r11 = np.int64((i0 + 1) * (n + 1) + j0 + 1)
    else:
        prime = np.uint64(2654435761)
        ts = np.uint64(tsize)
        ju = np.uint64(j0) * prime
        ju1 = np.uint64(j0 + 1) * prime
        r00 = np.int64((np.uint64(i0) ^ ju) % ts)
        r10 = np.int64((np.uint64(i0 + 1) ^ ju) % ts)
        r01 = np.int64((np.uint64(i0) ^ ju1) % ts)
        r11 = np.int64((np.uint64(i0 + 1) ^ ju1) % ts)
    return r00, r10, r01, r11


@njit(cache=True)
def _encode_kernel(uv, tables, res, tsize, out):
    B = uv.shape[0]
    L = tables.shape[0]
    F = tables.shape[2]
    for p in range(B):
        u = uv[p, 0]
        v = uv[p, 1]
        for l in range(L):
            n = res[l]
            x = u * n
            y = v * n
            i0 = int(np.floor(x))
            if i0 > n - 1:
                i0 = n - 1
            j0 = int(np.floor(y))
            if j0 > n - 1:
                j0 = n - 1
            fx = x - i0
            fy = y - j0
            w00 = (1.0 - fx) * (1.0 - fy)
            w10 = fx * (1.0 - fy)
            w01 = (1.0 - fx) * fy
            w11 = fx * fy
            r00, r10, r01, r11 = _corner_rows(n, tsize, i0, j0)
            base = l * F
            for c in range(F):
                out[p, base + c] = (w00 * tables[l, r00, c]
                                    + w10 * tables[l, r10, c]
                                    + w01 * tables[l, r01, c]
                                    + w11 * tables[l, r11, c])


@njit(cache=True)
def _scatter_kernel(uv, d_features, res, tsize, grads):
    B = uv.shape[0]
    L = grads.shape[0]
    F = grads.shape[2]
    for p in range(B):
        u = uv[p, 0]
        v = uv[p, 1]
        for l in range(L):
            n = res[l]
            x = u * n
            y = v * n
            i0 = int(np.floor(x))
            if i0 > n - 1:
                i0 = n - 1
            j0 = int(np.floor(y))
            if j0 > n - 1:
                j0 = n - 1
            fx = x - i0
            fy = y - j0
            w00 = (1.0 - fx) * (1.0 - fy)
            w10 = fx * (1.0 - fy)
            w01 = (1.0 - fx) * fy
            w11 = fx * fy
            r00, r10, r01, r11 = _corner_rows(n, tsize, i0, j0)
            base = l * F
            for c in range(F):
                d = d_features[p, base + c]
                grads[l, r00, c] += w00 * d
                grads[l, r10, c] += w10 * d
                grads[l, r01, c] += w01 * d
                grads[l, r11, c] += w11 * d


def _level_resolutions(cfg: HashGridConfig) -> np.ndarray:
    return np.array([cfg.resolution(l) for l in range(cfg.levels)], dtype=np.int64)


def encode(uv: np.ndarray, state: HashGridState,
           with_cache: bool = False):
    """Bilinear multi-level lookup; rows of `uv` in [0,1]^2 (clamped).

    Returns (B, L*F) features, concatenated coarse to fine.
    """
    cfg = state.config
    uv = np.ascontiguousarray(np.clip(np.atleast_2d(uv), 0.0, 1.0))
    dtype = state.tables[0].dtype
    out = np.empty((len(uv), cfg.feature_dim), dtype=dtype)
    tables = np.stack(state.tables)
    _encode_kernel(uv, tables, _level_resolutions(cfg), cfg.table_size, out)
    if with_cache:
        return out, EncodeCache(uv=uv)
    return out


def encode_backward(state: HashGridState, cache: EncodeCache,
                    d_features: np.ndarray) -> list:
    """Scatter feature gradients to table-entry gradients (deterministic order)."""
    cfg = state.config
    dtype = state.tables[0].dtype
    grads = np.zeros((cfg.levels, cfg.table_size, cfg.features_per_level), dtype=dtype)
    _scatter_kernel(cache.uv, np.ascontiguousarray(d_features, dtype=dtype),
                    _level_resolutions(cfg), cfg.table_size, grads)
    return [grads[l] for l in range(cfg.levels)]
