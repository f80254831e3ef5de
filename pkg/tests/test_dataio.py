import numpy as np
import pytest

from clearsplat.dataio import (
    DatasetError,
    decode_srgb_u8,
    encode_srgb_u8,
    load_color_png,
    load_gray_png,
    load_pfm,
    load_ply,
    load_png_u8,
    quantize_gray,
    quantize_srgb,
    save_color_png,
    save_gray_png,
    save_pfm,
    save_ply,
    save_png_u8,
    srgb_decode,
    srgb_encode,
)


def test_srgb_transfer_inverts_on_unit_interval():
    x = np.linspace(0.0, 1.0, 1001)
    back = srgb_decode(srgb_encode(x))
    assert np.max(np.abs(back - x)) < 1e-12


def test_srgb_u8_lattice_is_fixed_point():
    # every 8-bit code must survive decode -> encode unchanged
    codes = np.arange(256, dtype=np.uint8)
    assert np.array_equal(encode_srgb_u8(decode_srgb_u8(codes)), codes)


def test_quantize_srgb_is_idempotent():
    rng = np.random.Generator(np.random.PCG64(0))
    img = rng.uniform(0, 1, (9, 7, 3))
    once = quantize_srgb(img)
    assert np.array_equal(quantize_srgb(once), once)
    assert np.max(np.abs(once - img)) < 0.011  # linear step is widest near black


def test_quantize_gray_is_idempotent():
    rng = np.random.Generator(np.random.PCG64(1))
    x = rng.uniform(0, 1, (5, 6))
    once = quantize_gray(x)
    assert np.array_equal(quantize_gray(once), once)
    assert np.max(np.abs(once - x)) <= 0.5 / 255 + 1e-12


def test_color_png_roundtrip_exact_on_lattice(tmp_path):
    rng = np.random.Generator(np.random.PCG64(2))
    img = quantize_srgb(rng.uniform(0, 1, (8, 11, 3)))
    p = tmp_path / "c.png"
    save_color_png(p, img)
    assert np.array_equal(load_color_png(p), img)


def test_gray_png_roundtrip_exact_on_lattice(tmp_path):
    rng = np.random.Generator(np.random.PCG64(3))
    x = quantize_gray(rng.uniform(0, 1, (6, 4)))
    p = tmp_path / "g.png"
    save_gray_png(p, x)
    assert np.array_equal(load_gray_png(p), x)


def test_raw_u8_png_roundtrip(tmp_path):
    ids = np.arange(12, dtype=np.uint8).reshape(3, 4)
    p = tmp_path / "ids.png"
    save_png_u8(p, ids)
    assert np.array_equal(load_png_u8(p), ids)


def test_png_missing_file_names_path(tmp_path):
    with pytest.raises(DatasetError, match="nope.png"):
        load_png_u8(tmp_path / "nope.png")


def test_pfm_roundtrip_float32_exact(tmp_path):
    rng = np.random.Generator(np.random.PCG64(4))
    depth = rng.uniform(0.1, 80.0, (7, 5)).astype(np.float32).astype(np.float64)
    p = tmp_path / "d.pfm"
    save_pfm(p, depth)
    assert np.array_equal(load_pfm(p), depth)


def test_pfm_header_is_little_endian_bottom_up(tmp_path):
    depth = np.array([[1.0, 2.0], [3.0, 4.0]])
    p = tmp_path / "d.pfm"
    save_pfm(p, depth)
    raw = p.read_bytes()
    assert raw.startswith(b"Pf\n2 2\n-1.0\n")
    # first stored row is the bottom image row
    first = np.frombuffer(raw, dtype="<f4", offset=len(b"Pf\n2 2\n-1.0\n"), count=2)
    assert np.array_equal(first, np.array([3.0, 4.0], dtype=np.float32))


def test_pfm_malformed_raises_with_path(tmp_path):
    p = tmp_path / "bad.pfm"
    p.write_bytes(b"Px\nnot a pfm")
    with pytest.raises(DatasetError, match="bad.pfm"):
        load_pfm(p)


def test_ply_roundtrip(tmp_path):
    rng = np.random.Generator(np.random.PCG64(5))
    pts = rng.normal(size=(17, 3))
    col = rng.uniform(0, 1, (17, 3))
    p = tmp_path / "cloud.ply"
    save_ply(p, pts, col)
    pts2, col2 = load_ply(p)
    assert np.max(np.abs(pts2 - pts)) < 1e-5  # %.7g text precision
    assert np.max(np.abs(col2 - col)) <= 0.5 / 255 + 1e-12
    header = p.read_text().splitlines()
    assert header[0] == "ply"
    assert "element vertex 17" in header


def test_ply_malformed_raises(tmp_path):
    p = tmp_path / "bad.ply"
    p.write_text("not a ply\n")
    with pytest.raises(DatasetError, match="bad.ply"):
        load_ply(p)
