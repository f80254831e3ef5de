"""Versioned checkpoint container.

Layout: magic "DCGS", u32 format version, u64 JSON header length, JSON
header (config echo, iteration, structural metadata, parameter-group table
with offsets), then raw little-endian array blobs in table order. Loading
rebuilds a TrainState; an unknown version is an explicit error, never a
silent misread.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .config import RunConfig
from .decomposition import OpacityMap
from .field import HashGridConfig, HashGridState, MlpWeights, ObstructionField
from .splat import GaussianCloud
from .training import TrainState, gather_params

MAGIC = b"DCGS"
VERSION = 1


class CheckpointError(Exception):
    pass


def _le_dtype(arr: np.ndarray) -> str:
    kind = {"float32": "<f4", "float64": "<f8"}.get(arr.dtype.name)
    if kind is None:
        raise CheckpointError(f"unsupported parameter dtype {arr.dtype}")
    return kind


def save_checkpoint(path, state: TrainState) -> None:
    params = gather_params(state)
    table = []
    blobs = []
    offset = 0
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name])
        dt = _le_dtype(arr)
        raw = arr.astype(dt).tobytes()
        table.append({"name": name, "dtype": dt, "shape": list(arr.shape),
                      "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)

    field_meta = None
    if state.field is not None:
        g = state.field.grid.config
        field_meta = {
            "gated": state.field.gated,
            "bbox_min": state.field.bbox_min.tolist(),
            "bbox_max": state.field.bbox_max.tolist(),
            "grid": {"levels": g.levels, "features_per_level": g.features_per_level,
                     "table_size": g.table_size, "base_resolution": g.base_resolution,
                     "growth": g.growth},
        }
    header = {
        "config": state.config.to_dict(),
        "iteration": state.iteration,
        "scene_extent": state.scene_extent,
        "field": field_meta,
        "has_omap": state.omap is not None,
        "params": table,
    }
    head = json.dumps(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        for raw in blobs:
            fh.write(raw)


def _read_arrays(payload: bytes, table: list) -> dict:
    out = {}
    for ent in table:
        raw = payload[ent["offset"]: ent["offset"] + ent["nbytes"]]
        if len(raw) != ent["nbytes"]:
            raise CheckpointError(f"truncated blob for parameter '{ent['name']}'")
        out[ent["name"]] = np.frombuffer(raw, dtype=ent["dtype"]).reshape(
            ent["shape"]).copy()
    return out


def _rebuild_mlp(arrays: dict, prefix: str) -> MlpWeights:
    ws, bs, k = [], [], 0
    while f"{prefix}/W{k}" in arrays:
        ws.append(arrays[f"{prefix}/W{k}"])
        bs.append(arrays[f"{prefix}/b{k}"])
        k += 1
    return MlpWeights(weights=ws, biases=bs)


def load_checkpoint(path) -> TrainState:
    p = Path(path)
    try:
        raw = p.read_bytes()
    except FileNotFoundError:
        raise CheckpointError(f"missing checkpoint file: {p}") from None
    if len(raw) < 16 or raw[:4] != MAGIC:
        raise CheckpointError(f"{p} is not a checkpoint (bad magic)")
    version = struct.unpack("<I", raw[4:8])[0]
    if version != VERSION:
        raise CheckpointError(
            f"checkpoint format version {version} in {p}; this build reads version {VERSION}")
    head_len = struct.unpack("<Q", raw[8:16])[0]
    try:
        header = json.loads(raw[16:16 + head_len].decode("utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header in {p}: {exc}") from exc
    arrays = _read_arrays(raw[16 + head_len:], header["params"])

    config = RunConfig.from_dict(header["config"])
    cloud = GaussianCloud(
        means=arrays["gaussians/means"],
        log_scales=arrays["gaussians/log_scales"],
        rotations=arrays["gaussians/rotations"],
        opacity_logits=arrays["gaussians/opacity_logits"],
        color_logits=arrays["gaussians/color_logits"],
    )
    fld = None
    meta = header.get("field")
    if meta is not None:
        gc = HashGridConfig(**meta["grid"])
        tables = [arrays[f"hash/table{l}"] for l in range(gc.levels)]
        fld = ObstructionField(
            grid=HashGridState(config=gc, tables=tables),
            omega_mlp=_rebuild_mlp(arrays, "omega"),
            beta_mlp=_rebuild_mlp(arrays, "beta"),
            decoder=_rebuild_mlp(arrays, "decoder"),
            bbox_min=np.asarray(meta["bbox_min"], dtype=np.float64),
            bbox_max=np.asarray(meta["bbox_max"], dtype=np.float64),
            gated=bool(meta["gated"]),
        )
    omap = OpacityMap(logits=arrays["phi/logits"]) if header.get("has_omap") else None
    return TrainState(cloud=cloud, field=fld, omap=omap, config=config,
                      scene_extent=float(header["scene_extent"]),
                      iteration=int(header["iteration"]))
