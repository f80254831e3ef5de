"""File-format primitives: 8-bit sRGB PNG, linear gray PNG, PFM depth, ASCII PLY.

Color images live in linear RGB in memory and are stored as 8-bit sRGB
(IEC 61966-2-1 transfer). Opacity maps are stored as linear 8-bit gray.
Depth uses little-endian PFM because it needs float range. The encode/decode
pairs here are exact inverses on the 8-bit lattice, which the synthetic
dataset relies on for its recomposition invariant.
"""

from __future__ import annotations

import struct

import numpy as np
from PIL import Image


class DatasetError(Exception):
    """A dataset directory or file is missing or malformed."""


# --- sRGB transfer ----------------------------------------------------------

_SRGB_LIN_KNEE = 0.0031308
_SRGB_ENC_KNEE = 0.04045


def srgb_encode(linear: np.ndarray) -> np.ndarray:
    """Linear [0,1] -> sRGB-encoded [0,1]."""
    lin = np.clip(linear, 0.0, 1.0)
    low = 12.92 * lin
    high = 1.055 * np.power(lin, 1.0 / 2.4, where=lin > 0, out=np.zeros_like(lin)) - 0.055
    return np.where(lin <= _SRGB_LIN_KNEE, low, high)


def srgb_decode(encoded: np.ndarray) -> np.ndarray:
    """sRGB-encoded [0,1] -> linear [0,1]."""
    enc = np.asarray(encoded, dtype=np.float64)
    low = enc / 12.92
    high = np.power((enc + 0.055) / 1.055, 2.4)
    return np.where(enc <= _SRGB_ENC_KNEE, low, high)


def encode_srgb_u8(linear: np.ndarray) -> np.ndarray:
    return np.rint(srgb_encode(linear) * 255.0).astype(np.uint8)


def decode_srgb_u8(u8: np.ndarray) -> np.ndarray:
    return srgb_decode(u8.astype(np.float64) / 255.0)


def quantize_srgb(linear: np.ndarray) -> np.ndarray:
    """Snap a linear image onto the values an 8-bit sRGB PNG can represent."""
    return decode_srgb_u8(encode_srgb_u8(linear))


def encode_gray_u8(x: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(x, 0.0, 1.0) * 255.0).astype(np.uint8)


def decode_gray_u8(u8: np.ndarray) -> np.ndarray:
    return u8.astype(np.float64) / 255.0


def quantize_gray(x: np.ndarray) -> np.ndarray:
    return decode_gray_u8(encode_gray_u8(x))


# --- PNG --------------------------------------------------------------------

def save_png_u8(path, u8: np.ndarray) -> None:
    """Write raw uint8 data, (H, W) as grayscale or (H, W, 3) as RGB."""
    u8 = np.ascontiguousarray(u8)
    if u8.dtype != np.uint8:
        raise ValueError(f"expected uint8, got {u8.dtype}")
    if u8.ndim == 2:
        Image.fromarray(u8, mode="L").save(path)
    elif u8.ndim == 3 and u8.shape[2] == 3:
        Image.fromarray(u8, mode="RGB").save(path)
    else:
        raise ValueError(f"expected (H, W) or (H, W, 3), got {u8.shape}")


def load_png_u8(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            if im.mode not in ("L", "RGB"):
                im = im.convert("RGB" if len(im.getbands()) >= 3 else "L")
            return np.asarray(im)
    except FileNotFoundError:
        raise DatasetError(f"missing image file: {path}") from None
    except Exception as exc:  # Pillow raises several unrelated types
        raise DatasetError(f"cannot read image {path}: {exc}") from exc


def save_color_png(path, linear: np.ndarray) -> None:
    save_png_u8(path, encode_srgb_u8(linear))


def load_color_png(path) -> np.ndarray:
    u8 = load_png_u8(path)
    if u8.ndim != 3:
        raise DatasetError(f"expected color image at {path}, got shape {u8.shape}")
    return decode_srgb_u8(u8)


def save_gray_png(path, x: np.ndarray) -> None:
    save_png_u8(path, encode_gray_u8(x))


def load_gray_png(path) -> np.ndarray:
    u8 = load_png_u8(path)
    if u8.ndim != 2:
        raise DatasetError(f"expected grayscale image at {path}, got shape {u8.shape}")
    return decode_gray_u8(u8)


# --- PFM (portable float map) -----------------------------------------------

def save_pfm(path, data: np.ndarray) -> None:
    """Grayscale PFM, little-endian, rows bottom-up per the format."""
    arr = np.asarray(data, dtype=np.float32)
    if arr.ndim != 2:
        raise ValueError(f"PFM writer expects (H, W), got {arr.shape}")
    with open(path, "wb") as fh:
        fh.write(b"Pf\n")
        fh.write(f"{arr.shape[1]} {arr.shape[0]}\n".encode("ascii"))
        fh.write(b"-1.0\n")
        fh.write(np.flipud(arr).astype("<f4").tobytes())


def load_pfm(path) -> np.ndarray:
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except FileNotFoundError:
        raise DatasetError(f"missing depth file: {path}") from None
    try:
        magic, rest = raw.split(b"\n", 1)
        if magic not in (b"Pf", b"PF"):
            raise ValueError(f"bad magic {magic!r}")
        dims, rest = rest.split(b"\n", 1)
        scale_line, payload = rest.split(b"\n", 1)
        width, height = (int(tok) for tok in dims.split())
        scale = float(scale_line)
        channels = 3 if magic == b"PF" else 1
        dtype = "<f4" if scale < 0 else ">f4"
        count = width * height * channels
        flat = np.frombuffer(payload, dtype=dtype, count=count).astype(np.float64)
        shape = (height, width) if channels == 1 else (height, width, 3)
        img = flat.reshape(shape)
        if abs(scale) not in (0.0, 1.0):
            img = img * abs(scale)
        return np.flipud(img).copy()
    except (ValueError, struct.error) as exc:
        raise DatasetError(f"malformed PFM file {path}: {exc}") from exc


# --- ASCII PLY ---------------------------------------------------------------

def save_ply(path, points: np.ndarray, colors: np.ndarray | None = None) -> None:
    """ASCII point cloud: x y z plus uchar r g b (colors given in [0,1])."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"points must be (N, 3), got {pts.shape}")
    if colors is None:
        colors = np.full_like(pts, 0.5)
    col = np.rint(np.clip(colors, 0.0, 1.0) * 255.0).astype(np.uint8)
    if col.shape != pts.shape:
        raise ValueError(f"colors shape {col.shape} != points shape {pts.shape}")
    lines = [
        "ply", "format ascii 1.0", f"element vertex {len(pts)}",
        "property float x", "property float y", "property float z",
        "property uchar red", "property uchar green", "property uchar blue",
        "end_header",
    ]
    for p, c in zip(pts, col):
        lines.append(f"{p[0]:.7g} {p[1]:.7g} {p[2]:.7g} {c[0]} {c[1]} {c[2]}")
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")


def load_ply(path) -> tuple[np.ndarray, np.ndarray]:
    """Read back the ASCII layout written by save_ply. Returns (points, colors01)."""
    try:
        with open(path, "r", encoding="ascii") as fh:
            text = fh.read()
    except FileNotFoundError:
        raise DatasetError(f"missing PLY file: {path}") from None
    lines = text.splitlines()
    if not lines or lines[0].strip() != "ply":
        raise DatasetError(f"malformed PLY file {path}: missing header")
    n_vertex = None
    body_start = None
    for i, line in enumerate(lines):
        if line.startswith("element vertex"):
            n_vertex = int(line.split()[-1])
        if line.strip() == "end_header":
            body_start = i + 1
            break
    if n_vertex is None or body_start is None:
        raise DatasetError(f"malformed PLY file {path}: incomplete header")
    rows = [line.split() for line in lines[body_start:body_start + n_vertex]]
    if len(rows) != n_vertex:
        raise DatasetError(f"malformed PLY file {path}: expected {n_vertex} vertices")
    arr = np.asarray(rows, dtype=np.float64)
    return arr[:, :3], arr[:, 3:6] / 255.0
